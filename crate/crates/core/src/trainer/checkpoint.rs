//! `LFCK` checkpoints: magic, `u32` version, `u32`-length-prefixed JSON
//! metadata, then `u32` record count and per-key records (`u32`-length
//! key, tensor).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::backbone::{Backbone, BackboneConfig, ParamStore};
use crate::error::{Error, Result};
use crate::lora::{Family, Stage};
use crate::tensor::{read_u32, Tensor};
use crate::textcond::Vocabulary;

const MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::format("bad RNG word position"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: BackboneConfig,
    vocabulary: Vec<String>,
    stage: Stage,
    step: usize,
    finished: bool,
    seed: u64,
    rng: Option<RngState>,
    adam: Option<AdamMeta>,
}

/// Model plus the training state needed to resume or continue.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Backbone,
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub finished: bool,
    pub seed: u64,
    pub rng: Option<RngState>,
    pub adam: Option<AdamState>,
}

fn write_record<W: Write>(w: &mut W, key: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(key.len() as u32).to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    t.write_to(w)
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, w: &mut W) -> Result<()> {
    let meta = Metadata {
        config: ck.model.config().clone(),
        vocabulary: ck.model.vocab().tokens().to_vec(),
        stage: ck.stage,
        step: ck.step,
        finished: ck.finished,
        seed: ck.seed,
        rng: ck.rng.clone(),
        adam: ck.adam.as_ref().map(|a| AdamMeta {
            step: a.step,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let params = ck.model.params();
    let moments = ck.adam.as_ref().map_or(0, |a| a.m.len() + a.v.len());
    w.write_all(&((params.len() + moments) as u32).to_le_bytes())?;
    for (k, t) in params.iter() {
        write_record(w, &format!("{PARAM}{k}"), t)?;
    }
    if let Some(a) = &ck.adam {
        for (prefix, map) in [(ADAM_M, &a.m), (ADAM_V, &a.v)] {
            for (k, data) in map {
                let shape = params.get(k)?.shape();
                write_record(w, &format!("{prefix}{k}"), &Tensor::new(shape, data.clone())?)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("missing checkpoint header"))?;
    if &magic != MAGIC {
        return Err(Error::Version(format!(
            "expected checkpoint magic LFCK, found {magic:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::format("implausible metadata length"));
    }
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)
        .map_err(|_| Error::format("truncated checkpoint metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(&json).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;

    let records = read_u32(r)? as usize;
    let mut params = ParamStore::new();
    let mut adam = meta.adam.as_ref().map(|a| AdamState {
        step: a.step,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        ..AdamState::default()
    });
    for _ in 0..records {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::format("implausible key length"));
        }
        let mut kb = vec![0u8; len];
        r.read_exact(&mut kb)
            .map_err(|_| Error::format("truncated record key"))?;
        let key = String::from_utf8(kb).map_err(|_| Error::format("record key is not UTF-8"))?;
        let t = Tensor::read_from(r)?;
        if let Some(k) = key.strip_prefix(PARAM) {
            params.insert(k, t);
        } else if let (Some(k), Some(a)) = (key.strip_prefix(ADAM_M), adam.as_mut()) {
            a.m.insert(k.to_string(), t.into_data());
        } else if let (Some(k), Some(a)) = (key.strip_prefix(ADAM_V), adam.as_mut()) {
            a.v.insert(k.to_string(), t.into_data());
        } else {
            return Err(Error::UnknownKey(key));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after the last record"));
    }
    let vocab = Vocabulary::new(meta.vocabulary.iter().cloned());
    let model = Backbone::from_parts(meta.config, vocab, params)?;
    if let Some(a) = &adam {
        for (k, m) in a.m.iter().chain(a.v.iter()) {
            let p = model
                .params()
                .get(k)
                .map_err(|_| Error::UnknownKey(format!("optimizer moment {k}")))?;
            if p.numel() != m.len() {
                return Err(Error::shape("optimizer moment", p.shape(), &[m.len()]));
            }
        }
    }
    for (family, from) in [(Family::Motion, Stage::Motion), (Family::Content, Stage::Content)] {
        if model.has_family(family) != (meta.stage >= from) {
            return Err(Error::format(format!(
                "stage {} checkpoint {} {} adapters",
                meta.stage.number(),
                if model.has_family(family) { "carries" } else { "lacks" },
                family.name()
            )));
        }
    }
    Ok(Checkpoint {
        model,
        stage: meta.stage,
        step: meta.step,
        finished: meta.finished,
        seed: meta.seed,
        rng: meta.rng,
        adam,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ck, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| {
        Error::MissingPrerequisite(format!("checkpoint {}: {e}", path.display()))
    })?;
    read_checkpoint(&mut BufReader::new(f))
}
