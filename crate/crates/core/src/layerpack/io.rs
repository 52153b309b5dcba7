//! `LFQ1` sample files: magic, `u32` F/H/W, the four clips as raw
//! little-endian `f32` in fg/alpha/bg/blended order, then three
//! `u32`-length-prefixed UTF-8 prompts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerQuadruple, LayerVideos, Video};
use crate::error::{Error, Result};
use crate::tensor::read_u32;

const MAGIC: &[u8; 4] = b"LFQ1";

pub fn write_quadruple<W: Write>(q: &LayerQuadruple, w: &mut W) -> Result<()> {
    let (f, h, wd) = q.dims();
    w.write_all(MAGIC)?;
    for d in [f, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let v = &q.videos;
    for clip in [&v.foreground, &v.alpha, &v.background, &v.blended] {
        let mut buf = Vec::with_capacity(clip.data().len() * 4);
        for x in clip.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    for p in &q.prompts {
        w.write_all(&(p.len() as u32).to_le_bytes())?;
        w.write_all(p.as_bytes())?;
    }
    Ok(())
}

fn read_clip<R: Read>(r: &mut R, f: usize, h: usize, w: usize, c: usize) -> Result<Video> {
    let mut bytes = vec![0u8; f * h * w * c * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format("truncated video data"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Video::new(f, h, w, c, data)
}

pub fn read_quadruple<R: Read>(r: &mut R) -> Result<LayerQuadruple> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("missing sample header"))?;
    if &magic != MAGIC {
        return Err(Error::Version(format!(
            "expected sample magic LFQ1, found {magic:?}"
        )));
    }
    let f = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    if f == 0 || h == 0 || w == 0 || f * h * w > 1 << 26 {
        return Err(Error::format(format!("implausible extents {f}x{h}x{w}")));
    }
    let foreground = read_clip(r, f, h, w, 3)?;
    let alpha = read_clip(r, f, h, w, 1)?;
    let background = read_clip(r, f, h, w, 3)?;
    let blended = read_clip(r, f, h, w, 3)?;
    let mut prompts: [String; 3] = Default::default();
    for p in prompts.iter_mut() {
        let n = read_u32(r)? as usize;
        if n > 1 << 20 {
            return Err(Error::format("implausible prompt length"));
        }
        let mut b = vec![0u8; n];
        r.read_exact(&mut b)
            .map_err(|_| Error::format("truncated prompt"))?;
        *p = String::from_utf8(b).map_err(|_| Error::format("prompt is not UTF-8"))?;
    }
    LayerQuadruple::new(
        LayerVideos {
            foreground,
            alpha,
            background,
            blended,
        },
        prompts,
    )
}

pub fn write_quadruple_file(q: &LayerQuadruple, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_quadruple(q, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_quadruple_file(path: &Path) -> Result<LayerQuadruple> {
    let mut r = BufReader::new(File::open(path)?);
    read_quadruple(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LayerQuadruple {
        let fg = Video::new(2, 2, 2, 3, (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
        let alpha = Video::new(2, 2, 2, 1, (0..8).map(|i| i as f32 / 8.0).collect()).unwrap();
        let bg = Video::filled(2, 2, 2, 3, 0.25);
        let blended = super::super::composite(&fg, &alpha, &bg).unwrap();
        LayerQuadruple::new(
            LayerVideos {
                foreground: fg,
                alpha,
                background: bg,
                blended,
            },
            ["a red disc".into(), "".into(), "über".into()],
        )
        .unwrap()
    }

    #[test]
    fn header_layout_and_round_trip() {
        let q = sample();
        let mut buf = Vec::new();
        write_quadruple(&q, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LFQ1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        let expect = 16 + 4 * (24 + 8 + 24 + 24) + (4 + 10) + 4 + (4 + 5);
        assert_eq!(buf.len(), expect);
        assert_eq!(read_quadruple(&mut buf.as_slice()).unwrap(), q);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_quadruple(&sample(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_quadruple(&mut bad.as_slice()),
            Err(Error::Version(_))
        ));
        assert!(read_quadruple(&mut &buf[..buf.len() - 3]).is_err());
    }
}
