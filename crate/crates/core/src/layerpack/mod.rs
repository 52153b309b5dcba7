//! Layered video representation.
//!
//! A multi-layer clip is four aligned sub-clips (foreground RGB, alpha matte,
//! background, blended scene). For the denoiser they are patchified and
//! concatenated into one token sequence in the fixed order
//! fg → alpha → bg → blended; [`unpack`] inverts that on the pixel side.

mod io;
mod video;

pub use io::{read_quadruple, read_quadruple_file, write_quadruple, write_quadruple_file};
pub use video::Video;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sub-clip roles in packing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Foreground = 0,
    Alpha = 1,
    Background = 2,
    Blended = 3,
}

impl Segment {
    pub const ALL: [Segment; 4] = [
        Segment::Foreground,
        Segment::Alpha,
        Segment::Background,
        Segment::Blended,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Foreground => "fg",
            Segment::Alpha => "alpha",
            Segment::Background => "bg",
            Segment::Blended => "blended",
        }
    }
}

pub const NUM_SEGMENTS: usize = 4;

/// The four pixel videos of a layered clip, without prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVideos {
    pub foreground: Video,
    pub alpha: Video,
    pub background: Video,
    pub blended: Video,
}

impl LayerVideos {
    pub fn validate(&self) -> Result<()> {
        let (f, h, w) = self.foreground.dims();
        let checks = [
            (&self.foreground, 3, "foreground"),
            (&self.alpha, 1, "alpha"),
            (&self.background, 3, "background"),
            (&self.blended, 3, "blended"),
        ];
        for (v, c, name) in checks {
            if v.dims() != (f, h, w) || v.channels() != c {
                return Err(Error::shape(
                    "layer videos",
                    &[f, h, w, c],
                    &[v.frames(), v.height(), v.width(), v.channels()],
                ));
            }
            if name == "alpha" && v.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::invalid("alpha values must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn get(&self, s: Segment) -> &Video {
        match s {
            Segment::Foreground => &self.foreground,
            Segment::Alpha => &self.alpha,
            Segment::Background => &self.background,
            Segment::Blended => &self.blended,
        }
    }

    pub fn get_mut(&mut self, s: Segment) -> &mut Video {
        match s {
            Segment::Foreground => &mut self.foreground,
            Segment::Alpha => &mut self.alpha,
            Segment::Background => &mut self.background,
            Segment::Blended => &mut self.blended,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.foreground.dims()
    }
}

/// One training unit: four aligned videos plus prompts for the foreground,
/// background and blended layers (in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuadruple {
    pub videos: LayerVideos,
    pub prompts: [String; 3],
}

impl LayerQuadruple {
    pub fn new(videos: LayerVideos, prompts: [String; 3]) -> Result<Self> {
        videos.validate()?;
        Ok(LayerQuadruple { videos, prompts })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.videos.dims()
    }

    /// Largest per-channel deviation of `blended` from the alpha-over
    /// composite of the other three layers.
    pub fn composite_residual(&self) -> Result<f32> {
        let v = &self.videos;
        let c = composite(&v.foreground, &v.alpha, &v.background)?;
        Ok(c
            .data()
            .iter()
            .zip(v.blended.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }
    /// Mean absolute deviation of `blended` from the composite.
    pub fn composite_mean_residual(&self) -> Result<f32> {
        let v = &self.videos;
        let c = composite(&v.foreground, &v.alpha, &v.background)?;
        let sum: f64 = c
            .data()
            .iter()
            .zip(v.blended.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok((sum / c.data().len() as f64) as f32)
    }
}

/// Alpha-over: `alpha·fg + (1−alpha)·bg`, clamped to `[0, 1]`.
pub fn composite(fg: &Video, alpha: &Video, bg: &Video) -> Result<Video> {
    if !fg.same_extent(alpha) || !fg.same_extent(bg) {
        return Err(Error::shape(
            "composite",
            &[fg.frames(), fg.height(), fg.width()],
            &[bg.frames(), bg.height(), bg.width()],
        ));
    }
    if alpha.channels() != 1 || fg.channels() != bg.channels() {
        return Err(Error::invalid(
            "composite needs a 1-channel alpha and equal fg/bg channels",
        ));
    }
    let c = fg.channels();
    let mut out = Vec::with_capacity(fg.data().len());
    for (i, &a) in alpha.data().iter().enumerate() {
        for k in 0..c {
            let v = a * fg.data()[i * c + k] + (1.0 - a) * bg.data()[i * c + k];
            out.push(v.clamp(0.0, 1.0));
        }
    }
    let (f, h, w) = fg.dims();
    Video::new(f, h, w, c, out)
}

/// Which sub-clips are held as clean conditions rather than generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionMask {
    fixed: [bool; NUM_SEGMENTS],
}

impl ConditionMask {
    pub fn new(fixed: [bool; NUM_SEGMENTS]) -> Result<Self> {
        if fixed.iter().all(|&f| f) {
            return Err(Error::invalid(
                "condition mask fixes every segment; nothing to generate",
            ));
        }
        Ok(ConditionMask { fixed })
    }

    pub const fn generation() -> Self {
        ConditionMask {
            fixed: [false, false, false, false],
        }
    }

    pub const fn foreground_conditioned() -> Self {
        ConditionMask {
            fixed: [true, true, false, false],
        }
    }

    pub const fn background_conditioned() -> Self {
        ConditionMask {
            fixed: [false, false, true, false],
        }
    }

    pub const fn decomposition() -> Self {
        ConditionMask {
            fixed: [false, false, false, true],
        }
    }

    pub fn fixed(&self) -> [bool; NUM_SEGMENTS] {
        self.fixed
    }

    pub fn is_fixed(&self, s: Segment) -> bool {
        self.fixed[s.index()]
    }

    pub fn generated_segments(&self) -> impl Iterator<Item = Segment> + '_ {
        Segment::ALL.into_iter().filter(|s| !self.is_fixed(*s))
    }

    /// Compact form such as `TTFF`.
    pub fn code(&self) -> String {
        self.fixed
            .iter()
            .map(|&f| if f { 'T' } else { 'F' })
            .collect()
    }

    pub fn from_code(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != NUM_SEGMENTS {
            return Err(Error::invalid(format!("bad mask code `{code}`")));
        }
        let mut fixed = [false; NUM_SEGMENTS];
        for (f, c) in fixed.iter_mut().zip(chars) {
            *f = match c {
                'T' | 't' | '1' => true,
                'F' | 'f' | '0' => false,
                _ => return Err(Error::invalid(format!("bad mask code `{code}`"))),
            };
        }
        Self::new(fixed)
    }
}

/// Rows of segment `s` in a packed token matrix with `rows` rows.
pub fn segment_rows(rows: usize, s: Segment) -> std::ops::Range<usize> {
    let n = rows / NUM_SEGMENTS;
    s.index() * n..(s.index() + 1) * n
}

/// Replaces every fixed segment of `xt` with the clean tokens of `x0`.
pub fn apply_condition(xt: &Tensor, x0: &Tensor, mask: &ConditionMask) -> Result<Tensor> {
    if xt.shape() != x0.shape() || xt.rank() != 2 || xt.shape()[0] % NUM_SEGMENTS != 0 {
        return Err(Error::shape("apply_condition", xt.shape(), x0.shape()));
    }
    let rows = xt.shape()[0];
    let width = xt.shape()[1];
    let mut out = xt.clone().with_requires_grad(false);
    for s in Segment::ALL {
        if mask.is_fixed(s) {
            let r = segment_rows(rows, s);
            out.data_mut()[r.start * width..r.end * width]
                .copy_from_slice(&x0.data()[r.start * width..r.end * width]);
        }
    }
    Ok(out)
}

/// Maps `p×p×3` pixel patches to token vectors and back.
pub trait PatchCodec {
    fn patch_dim(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn embed(&self, patch: &[f32], token: &mut [f32]);
    fn unembed(&self, token: &[f32], patch: &mut [f32]);
}

/// Exactly invertible embedding: the patch is copied into the leading
/// coordinates of a zero-padded token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCodec {
    patch_dim: usize,
    token_dim: usize,
}

impl PixelCodec {
    pub fn new(patch: usize) -> Self {
        let d = patch * patch * 3;
        PixelCodec {
            patch_dim: d,
            token_dim: d,
        }
    }

    pub fn padded(patch: usize, token_dim: usize) -> Result<Self> {
        let d = patch * patch * 3;
        if token_dim < d {
            return Err(Error::invalid(format!(
                "token dim {token_dim} below patch dim {d}"
            )));
        }
        Ok(PixelCodec {
            patch_dim: d,
            token_dim,
        })
    }
}

impl PatchCodec for PixelCodec {
    fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn embed(&self, patch: &[f32], token: &mut [f32]) {
        token[..self.patch_dim].copy_from_slice(patch);
        token[self.patch_dim..].iter_mut().for_each(|t| *t = 0.0);
    }

    fn unembed(&self, token: &[f32], patch: &mut [f32]) {
        patch.copy_from_slice(&token[..self.patch_dim]);
    }
}

/// Concatenated token sequence of all four sub-clips.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub tokens: Tensor,
    pub segment_offsets: [usize; NUM_SEGMENTS],
    pub frames: usize,
    /// Patch grid `(rows, cols)` per frame.
    pub grid: (usize, usize),
    pub patch: usize,
    /// `(clip, frame, patch)` per token.
    pub position_ids: Vec<[usize; 3]>,
}

impl PackedSequence {
    pub fn tokens_per_segment(&self) -> usize {
        self.frames * self.grid.0 * self.grid.1
    }

    pub fn len(&self) -> usize {
        NUM_SEGMENTS * self.tokens_per_segment()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position ids for a layout, independent of token content.
    pub fn layout_positions(frames: usize, grid: (usize, usize)) -> Vec<[usize; 3]> {
        let np = grid.0 * grid.1;
        let mut ids = Vec::with_capacity(NUM_SEGMENTS * frames * np);
        for clip in 0..NUM_SEGMENTS {
            for f in 0..frames {
                for p in 0..np {
                    ids.push([clip, f, p]);
                }
            }
        }
        ids
    }

    /// Same layout, different tokens.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != self.len() {
            return Err(Error::shape("with_tokens", tokens.shape(), &[self.len()]));
        }
        Ok(PackedSequence {
            tokens,
            ..self.clone()
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.tokens_per_segment();
        let expect: Vec<usize> = (0..NUM_SEGMENTS).map(|i| i * n).collect();
        if self.segment_offsets[..] != expect[..] {
            return Err(Error::format(format!(
                "segment offsets {:?} inconsistent with {n} tokens per segment",
                self.segment_offsets
            )));
        }
        if self.tokens.rank() != 2 || self.tokens.shape()[0] != NUM_SEGMENTS * n {
            return Err(Error::shape(
                "packed sequence",
                self.tokens.shape(),
                &[NUM_SEGMENTS * n],
            ));
        }
        if self.position_ids.len() != NUM_SEGMENTS * n {
            return Err(Error::format("position id count differs from token count"));
        }
        Ok(())
    }
}

fn patchify(v: &Video, patch: usize, codec: &dyn PatchCodec, out: &mut Vec<f32>) {
    let (f, h, w) = v.dims();
    let (gh, gw) = (h / patch, w / patch);
    let mut buf = vec![0.0; codec.patch_dim()];
    let mut tok = vec![0.0; codec.token_dim()];
    for fi in 0..f {
        for py in 0..gh {
            for px in 0..gw {
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..3 {
                            buf[k] = v.get(fi, py * patch + dy, px * patch + dx, c);
                            k += 1;
                        }
                    }
                }
                codec.embed(&buf, &mut tok);
                out.extend_from_slice(&tok);
            }
        }
    }
}

/// Patchifies and concatenates the four sub-clips (fg, alpha, bg, blended).
/// The alpha clip travels as three identical channels.
pub fn pack(videos: &LayerVideos, patch: usize, codec: &dyn PatchCodec) -> Result<PackedSequence> {
    videos.validate()?;
    let (f, h, w) = videos.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    if codec.patch_dim() != patch * patch * 3 {
        return Err(Error::invalid("codec patch dim does not match patch size"));
    }
    let grid = (h / patch, w / patch);
    let per_seg = f * grid.0 * grid.1;
    let mut data = Vec::with_capacity(NUM_SEGMENTS * per_seg * codec.token_dim());
    let alpha3 = videos.alpha.gray_to_rgb()?;
    for v in [
        &videos.foreground,
        &alpha3,
        &videos.background,
        &videos.blended,
    ] {
        patchify(v, patch, codec, &mut data);
    }
    let tokens = Tensor::new(&[NUM_SEGMENTS * per_seg, codec.token_dim()], data)?;
    Ok(PackedSequence {
        tokens,
        segment_offsets: [0, per_seg, 2 * per_seg, 3 * per_seg],
        frames: f,
        grid,
        patch,
        position_ids: PackedSequence::layout_positions(f, grid),
    })
}

/// Inverse of [`pack`] on the pixel side. The alpha clip is the channel
/// mean of its segment, clamped to `[0, 1]`.
pub fn unpack(seq: &PackedSequence, codec: &dyn PatchCodec) -> Result<LayerVideos> {
    seq.validate()?;
    if seq.tokens.shape()[1] != codec.token_dim() {
        return Err(Error::shape(
            "unpack",
            seq.tokens.shape(),
            &[codec.token_dim()],
        ));
    }
    let p = seq.patch;
    let (gh, gw) = seq.grid;
    let (f, h, w) = (seq.frames, gh * p, gw * p);
    let td = codec.token_dim();
    let mut patch = vec![0.0; codec.patch_dim()];
    let mut clips = Vec::with_capacity(NUM_SEGMENTS);
    for s in Segment::ALL {
        let mut v = Video::filled(f, h, w, 3, 0.0);
        let base = seq.segment_offsets[s.index()];
        for fi in 0..f {
            for py in 0..gh {
                for px in 0..gw {
                    let row = base + (fi * gh + py) * gw + px;
                    codec.unembed(&seq.tokens.data()[row * td..(row + 1) * td], &mut patch);
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for c in 0..3 {
                                v.set(fi, py * p + dy, px * p + dx, c, patch[k]);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        clips.push(v);
    }
    let blended = clips.pop().unwrap();
    let background = clips.pop().unwrap();
    let alpha3 = clips.pop().unwrap();
    let foreground = clips.pop().unwrap();
    // f64 mean keeps three identical channels bit-exact.
    let alpha_data = alpha3
        .data()
        .chunks_exact(3)
        .map(|c| {
            let m = (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0;
            (m as f32).clamp(0.0, 1.0)
        })
        .collect();
    Ok(LayerVideos {
        foreground,
        alpha: Video::new(f, h, w, 1, alpha_data)?,
        background,
        blended,
    })
}
