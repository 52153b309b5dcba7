//! The denoising transformer.
//!
//! Text tokens (three prompt blocks) and the packed video tokens are joined
//! into one sequence and processed with dense bidirectional attention, so
//! every layer's sub-clip attends to every other layer and to all prompts.
//! Each block is adaptive-norm → attention → residual → adaptive-norm →
//! feed-forward → residual, with shift/scale driven by the timestep
//! embedding. A linear head maps the video positions back to patch pixels
//! as the noise prediction.

mod params;

pub use params::{Bindings, ParamStore};

use std::collections::BTreeSet;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerpack::NUM_SEGMENTS;
use crate::lora::{AdapterKey, Family, Gate, Projection};
use crate::tensor::{Tape, Tensor, Var};
use crate::textcond::{embed_tokens, TextTokens, Vocabulary, NUM_TEXT_LAYERS};

pub const LN_EPS: f32 = 1e-5;
const FFN_MULT: usize = 4;
/// Additive attention bias for padded text keys.
const MASKED_KEY: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch: usize,
    /// Tokens per prompt block.
    pub text_len: usize,
    pub max_frames: usize,
    pub max_patches: usize,
    pub lora_rank: usize,
    /// Diffusion steps the timestep embedding accepts.
    pub timesteps: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_blocks: 6,
            n_heads: 4,
            patch: 4,
            text_len: 16,
            max_frames: 16,
            max_patches: 64,
            lora_rank: 4,
            timesteps: 100,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for the sinusoidal timestep features");
        }
        if self.n_blocks == 0 || self.patch == 0 || self.text_len == 0 {
            return bad("n_blocks, patch and text_len must be positive");
        }
        if self.max_frames == 0 || self.max_patches == 0 || self.timesteps == 0 {
            return bad("max_frames, max_patches and timesteps must be positive");
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return bad("lora_rank must lie in 1..=d_model");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Pixel values per patch token (`p·p·3`).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// The last ⌈n_blocks/6⌉ blocks: the ones trained in stage 1 and hosting
    /// adapters.
    pub fn designated_blocks(&self) -> Range<usize> {
        let k = self.n_blocks.div_ceil(6);
        self.n_blocks - k..self.n_blocks
    }
}

/// Denoiser `ε_θ(x_t, t, text)` with its parameters and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    vocab: Vocabulary,
    params: ParamStore,
    gate: Gate,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n = Normal::new(0.0f32, std).expect("valid std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

impl Backbone {
    /// Fresh randomly initialized model without adapters.
    pub fn new(config: BackboneConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let p = config.patch_dim();
        let h = FFN_MULT * d;
        let fan = |n: usize| (1.0 / n as f32).sqrt();
        let resid = fan(d) / (2.0 * config.n_blocks as f32).sqrt();
        let mut ps = ParamStore::new();

        ps.insert("embed.w", normal(&mut rng, &[p, d], fan(p)));
        ps.insert("embed.b", Tensor::zeros(&[d]));
        ps.insert("pos.clip", normal(&mut rng, &[NUM_SEGMENTS, d], 0.1));
        ps.insert("pos.frame", normal(&mut rng, &[config.max_frames, d], 0.1));
        ps.insert("pos.patch", normal(&mut rng, &[config.max_patches, d], 0.1));
        ps.insert("text.vocab", normal(&mut rng, &[vocab.len(), d], 0.1));
        ps.insert("text.layer", normal(&mut rng, &[NUM_TEXT_LAYERS, d], 0.1));
        ps.insert("time.w1", normal(&mut rng, &[d, d], fan(d)));
        ps.insert("time.b1", Tensor::zeros(&[d]));
        ps.insert("time.w2", normal(&mut rng, &[d, d], fan(d)));
        ps.insert("time.b2", Tensor::zeros(&[d]));
        for b in 0..config.n_blocks {
            let k = |s: &str| format!("blocks.{b}.{s}");
            ps.insert(k("norm1.g"), Tensor::full(&[d], 1.0));
            ps.insert(k("norm1.b"), Tensor::zeros(&[d]));
            ps.insert(k("norm2.g"), Tensor::full(&[d], 1.0));
            ps.insert(k("norm2.b"), Tensor::zeros(&[d]));
            for proj in ["q", "k", "v"] {
                ps.insert(k(&format!("attn.{proj}.w")), normal(&mut rng, &[d, d], fan(d)));
                ps.insert(k(&format!("attn.{proj}.b")), Tensor::zeros(&[d]));
            }
            ps.insert(k("attn.o.w"), normal(&mut rng, &[d, d], resid));
            ps.insert(k("attn.o.b"), Tensor::zeros(&[d]));
            ps.insert(k("ffn.w1"), normal(&mut rng, &[d, h], fan(d)));
            ps.insert(k("ffn.b1"), Tensor::zeros(&[h]));
            ps.insert(k("ffn.w2"), normal(&mut rng, &[h, d], fan(h) / (2.0 * config.n_blocks as f32).sqrt()));
            ps.insert(k("ffn.b2"), Tensor::zeros(&[d]));
            ps.insert(k("ada.w"), normal(&mut rng, &[d, 2 * d], 0.5 * fan(d)));
            ps.insert(k("ada.b"), Tensor::zeros(&[2 * d]));
        }
        ps.insert("final.norm.g", Tensor::full(&[d], 1.0));
        ps.insert("final.norm.b", Tensor::zeros(&[d]));
        ps.insert("final.ada.w", normal(&mut rng, &[d, 2 * d], 0.5 * fan(d)));
        ps.insert("final.ada.b", Tensor::zeros(&[2 * d]));
        ps.insert("head.w", normal(&mut rng, &[d, p], 0.02));
        ps.insert("head.b", Tensor::zeros(&[p]));

        Ok(Backbone {
            config,
            vocab,
            params: ps,
            gate: Gate::Off,
        })
    }

    /// Reassembles a model from stored parameters; used by checkpoint loading.
    pub fn from_parts(config: BackboneConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Backbone::new(config.clone(), vocab.clone(), 0)?;
        for (k, t) in reference.params.iter() {
            let got = params.get(k)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("parameter", t.shape(), got.shape()));
            }
        }
        let d = config.d_model;
        let r = config.lora_rank;
        for (k, t) in params.iter() {
            if reference.params.contains(k) {
                continue;
            }
            let host = parse_adapter_key(k, &config).ok_or_else(|| Error::UnknownKey(k.clone()))?;
            // A is [d_out, r] and B is [d_in, r]; both projections are square.
            let want = [d, r];
            if t.shape() != want {
                return Err(Error::shape("adapter", &want, t.shape()));
            }
            let other = if k.ends_with(".a") {
                host.b_key()
            } else {
                host.a_key()
            };
            if !params.contains(&other) {
                return Err(Error::MissingKey(other));
            }
        }
        Ok(Backbone {
            config,
            vocab,
            params,
            gate: Gate::Off,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn gate(&self) -> Gate {
        self.gate
    }

    pub(crate) fn set_gate(&mut self, gate: Gate) {
        self.gate = gate;
    }

    pub fn has_family(&self, family: Family) -> bool {
        self.params
            .keys()
            .any(|k| k.starts_with("lora.") && k.contains(&format!(".{}.", family.name())))
    }

    /// Removes every adapter of `family`.
    pub fn detach_family(&mut self, family: Family) {
        let keys: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with("lora.") && k.contains(&format!(".{}.", family.name())))
            .cloned()
            .collect();
        for k in keys {
            self.params.remove(&k);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<String>) -> Bindings {
        self.params.bind(tape, trainable)
    }

    /// Raw sinusoidal features: `sin(t·f_i)` then `cos(t·f_i)`.
    pub fn timestep_features(&self, t: usize) -> Result<Tensor> {
        if t >= self.config.timesteps {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..{}",
                self.config.timesteps
            )));
        }
        let d = self.config.d_model;
        let half = d / 2;
        let mut v = vec![0.0f32; d];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            v[i] = a.sin() as f32;
            v[half + i] = a.cos() as f32;
        }
        Tensor::new(&[1, d], v)
    }

    /// Sinusoidal features through the two-layer map, shape `[1, d]`.
    pub fn timestep_embed(&self, tape: &mut Tape, b: &Bindings, t: usize) -> Result<Var> {
        let feats = tape.constant(self.timestep_features(t)?);
        let h = linear(tape, feats, b.var("time.w1")?, Some(b.var("time.b1")?))?;
        let h = tape.gelu(h);
        linear(tape, h, b.var("time.w2")?, Some(b.var("time.b2")?))
    }

    fn adapter_vars(&self, b: &Bindings, block: usize, projection: Projection, family: Family) -> Option<(Var, Var)> {
        let key = AdapterKey {
            block,
            projection,
            family,
        };
        Some((b.get(&key.a_key())?, b.get(&key.b_key())?))
    }

    /// Multi-head attention of one block over the full sequence `x: [L, d]`.
    /// `key_bias` (shape `[L]`) masks padded keys.
    pub fn attention(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        block: usize,
        x: Var,
        key_bias: Option<Var>,
        gate: Gate,
    ) -> Result<Var> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let k = |s: &str| format!("blocks.{block}.attn.{s}");
        let mut qkv = Vec::with_capacity(3);
        for proj in Projection::ALL {
            let name = proj.name();
            qkv.push(crate::lora::adapted_projection(
                tape,
                x,
                b.var(&k(&format!("{name}.w")))?,
                Some(b.var(&k(&format!("{name}.b")))?),
                self.adapter_vars(b, block, proj, Family::Motion),
                self.adapter_vars(b, block, proj, Family::Content),
                gate,
            )?);
        }
        let (q, kk, v) = (qkv[0], qkv[1], qkv[2]);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(kk, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let s = tape.matmul_t(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(bias) = key_bias {
                s = tape.add(s, bias)?;
            }
            let p = tape.softmax(s);
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        linear(tape, o, b.var(&k("o.w"))?, Some(b.var(&k("o.b"))?))
    }

    /// `layer_norm(x)·(1 + scale) + shift`.
    fn modulated_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        gain: Var,
        bias: Var,
        shift: Var,
        scale1p: Var,
    ) -> Result<Var> {
        let n = tape.layer_norm(x, gain, bias, LN_EPS)?;
        let n = tape.mul(n, scale1p)?;
        tape.add(n, shift)
    }

    /// Splits a `[1, 2d]` modulation row into `(shift, 1 + scale)`, each `[d]`.
    fn modulation(&self, tape: &mut Tape, temb_act: Var, w: Var, bias: Var) -> Result<(Var, Var)> {
        let d = self.config.d_model;
        let m = linear(tape, temb_act, w, Some(bias))?;
        let shift = tape.slice_cols(m, 0, d)?;
        let shift = tape.reshape(shift, &[d])?;
        let scale = tape.slice_cols(m, d, d)?;
        let scale = tape.reshape(scale, &[d])?;
        let one = tape.scalar(1.0);
        let scale1p = tape.add(scale, one)?;
        Ok((shift, scale1p))
    }

    fn check_positions(&self, positions: &[[usize; 3]]) -> Result<()> {
        for p in positions {
            if p[0] >= NUM_SEGMENTS || p[1] >= self.config.max_frames || p[2] >= self.config.max_patches {
                return Err(Error::invalid(format!(
                    "position {p:?} exceeds the embedding tables"
                )));
            }
        }
        Ok(())
    }

    /// Noise prediction for the video tokens `x: [N, patch_dim]`; the text
    /// positions act as attention context only.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        positions: &[[usize; 3]],
        text: &TextTokens,
        t: usize,
        gate: Gate,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = tape.shape(x)[0];
        if tape.shape(x) != [n, cfg.patch_dim()] || positions.len() != n {
            return Err(Error::shape("backbone input", tape.shape(x), &[positions.len(), cfg.patch_dim()]));
        }
        if text.block_len != cfg.text_len || text.len() != NUM_TEXT_LAYERS * cfg.text_len {
            return Err(Error::shape("text tokens", &[text.len()], &[NUM_TEXT_LAYERS * cfg.text_len]));
        }
        self.check_positions(positions)?;

        let temb = self.timestep_embed(tape, b, t)?;
        let temb_act = tape.gelu(temb);

        let mut hv = linear(tape, x, b.var("embed.w")?, Some(b.var("embed.b")?))?;
        let col = |i: usize| positions.iter().map(|p| p[i]).collect::<Vec<_>>();
        for (i, table) in ["pos.clip", "pos.frame", "pos.patch"].into_iter().enumerate() {
            let e = tape.gather_rows(b.var(table)?, &col(i))?;
            hv = tape.add(hv, e)?;
        }
        let ht = embed_tokens(tape, text, b.var("text.vocab")?, b.var("text.layer")?)?;
        let text_rows = text.len();
        let mut h = tape.concat_rows(&[ht, hv])?;

        let key_bias = if text.padding.iter().any(|&p| p) {
            let mut bias = vec![0.0f32; text_rows + n];
            for (i, &p) in text.padding.iter().enumerate() {
                if p {
                    bias[i] = MASKED_KEY;
                }
            }
            Some(tape.constant(Tensor::new(&[text_rows + n], bias)?))
        } else {
            None
        };

        for blk in 0..cfg.n_blocks {
            let k = |s: &str| format!("blocks.{blk}.{s}");
            let (shift, scale1p) = self.modulation(tape, temb_act, b.var(&k("ada.w"))?, b.var(&k("ada.b"))?)?;
            let a = self.modulated_norm(tape, h, b.var(&k("norm1.g"))?, b.var(&k("norm1.b"))?, shift, scale1p)?;
            let a = self.attention(tape, b, blk, a, key_bias, gate)?;
            h = tape.add(h, a)?;
            let f = self.modulated_norm(tape, h, b.var(&k("norm2.g"))?, b.var(&k("norm2.b"))?, shift, scale1p)?;
            let f = linear(tape, f, b.var(&k("ffn.w1"))?, Some(b.var(&k("ffn.b1"))?))?;
            let f = tape.gelu(f);
            let f = linear(tape, f, b.var(&k("ffn.w2"))?, Some(b.var(&k("ffn.b2"))?))?;
            h = tape.add(h, f)?;
        }

        let hv = tape.slice_rows(h, text_rows, n)?;
        let (shift, scale1p) = self.modulation(tape, temb_act, b.var("final.ada.w")?, b.var("final.ada.b")?)?;
        let hv = self.modulated_norm(tape, hv, b.var("final.norm.g")?, b.var("final.norm.b")?, shift, scale1p)?;
        linear(tape, hv, b.var("head.w")?, Some(b.var("head.b")?))
    }

    /// Gradient-free forward returning the noise prediction.
    pub fn predict(
        &self,
        x: &Tensor,
        positions: &[[usize; 3]],
        text: &TextTokens,
        t: usize,
        gate: Gate,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &BTreeSet::new());
        let vx = tape.constant(x.clone());
        let y = self.forward(&mut tape, &b, vx, positions, text, t, gate)?;
        Ok(tape.tensor(y))
    }
}

/// `x·w (+ bias)`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

pub(crate) fn parse_adapter_key(key: &str, cfg: &BackboneConfig) -> Option<AdapterKey> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 5 || parts[0] != "lora" || !matches!(parts[4], "a" | "b") {
        return None;
    }
    let block: usize = parts[1].parse().ok()?;
    if !cfg.designated_blocks().contains(&block) {
        return None;
    }
    let projection = Projection::ALL.into_iter().find(|p| p.name() == parts[2])?;
    let family = [Family::Motion, Family::Content]
        .into_iter()
        .find(|f| f.name() == parts[3])?;
    Some(AdapterKey {
        block,
        projection,
        family,
    })
}
