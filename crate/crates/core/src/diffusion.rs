//! Linear-β DDPM: forward noising, the masked ε-prediction loss and an
//! ancestral sampler with classifier-free guidance.
//!
//! Pixels in `[0, 1]` are mapped to `[-1, 1]` before noising. Fixed
//! segments of a [`ConditionMask`] always carry clean tokens and are left
//! out of the loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Bindings};
use crate::error::{Error, Result};
use crate::layerpack::{
    apply_condition, pack, segment_rows, unpack, ConditionMask, LayerVideos, PackedSequence,
    PixelCodec, Segment, Video,
};
use crate::lora::Gate;
use crate::tensor::{Tape, Tensor, Var};
use crate::textcond::{null_tokens, tokenize_prompts, TextTokens};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Tensor,
    alpha_bar: Tensor,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.numel()
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &Tensor {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> f32 {
        self.alpha_bar.data()[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..{}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f32, beta_end: f32) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start as f64
            } else {
                beta_start as f64
                    + (beta_end as f64 - beta_start as f64) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    schedule_from_betas(&betas)
}

/// Schedule with explicit β values.
pub fn schedule_from_betas(betas: &[f64]) -> Result<NoiseSchedule> {
    if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::invalid("every beta must lie in (0, 1)"));
    }
    let mut acc = 1.0f64;
    let alpha_bar: Vec<f32> = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc as f32
        })
        .collect();
    let n = betas.len();
    Ok(NoiseSchedule {
        beta: Tensor::new(&[n], betas.iter().map(|&b| b as f32).collect())?,
        alpha_bar: Tensor::new(&[n], alpha_bar)?,
    })
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    q_sample_with(x0, schedule.alpha_bar_at(t), eps)
}

/// Forward noising at an explicit `ᾱ`, including the limits 0 and 1.
pub fn q_sample_with(x0: &Tensor, alpha_bar: f32, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape(), data)
}

/// Standard-normal tensor from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Packs layer videos and maps pixels to `[-1, 1]`.
pub fn encode_layers(videos: &LayerVideos, patch: usize) -> Result<PackedSequence> {
    let seq = pack(videos, patch, &PixelCodec::new(patch))?;
    let tokens = seq.tokens.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    let tokens = Tensor::new(seq.tokens.shape(), tokens)?;
    seq.with_tokens(tokens)
}

/// Inverse of [`encode_layers`], clamping pixels to `[0, 1]`.
pub fn decode_layers(seq: &PackedSequence) -> Result<LayerVideos> {
    let px = seq
        .tokens
        .data()
        .iter()
        .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    let px = seq.with_tokens(Tensor::new(seq.tokens.shape(), px)?)?;
    unpack(&px, &PixelCodec::new(seq.patch))
}

/// One training example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor,
    pub positions: Vec<[usize; 3]>,
    pub text: TextTokens,
    pub mask: ConditionMask,
    pub t: usize,
    pub eps: Tensor,
}

/// Same-gate group of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
    pub gate: Gate,
}

/// Per-element loss weights: `1/count` on generated rows, 0 on fixed rows.
pub fn loss_weights(rows: usize, width: usize, mask: &ConditionMask) -> Result<Tensor> {
    let generated: usize = mask
        .generated_segments()
        .map(|s| segment_rows(rows, s).len())
        .sum();
    if generated == 0 {
        return Err(Error::invalid("condition mask fixes every segment"));
    }
    let w = 1.0 / (generated * width) as f32;
    let mut data = vec![0.0f32; rows * width];
    for s in mask.generated_segments() {
        let r = segment_rows(rows, s);
        data[r.start * width..r.end * width].fill(w);
    }
    Tensor::new(&[rows, width], data)
}

/// Model input for an example: noised generated segments, clean fixed ones.
pub fn noised_input(ex: &TrainExample, schedule: &NoiseSchedule) -> Result<Tensor> {
    let xt = q_sample(&ex.x0, ex.t, &ex.eps, schedule)?;
    apply_condition(&xt, &ex.x0, &ex.mask)
}

/// `Σ w·(ε̂ − ε)²` over one example, so fixed rows contribute exactly zero.
pub fn weighted_error(tape: &mut Tape, pred: Var, eps: &Tensor, weights: &Tensor) -> Result<Var> {
    let target = tape.constant(eps.clone());
    let w = tape.constant(weights.clone());
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let wsq = tape.mul(sq, w)?;
    Ok(tape.sum(wsq))
}

/// Masked ε-MSE of one example recorded on `tape`.
pub fn masked_loss(
    tape: &mut Tape,
    model: &Backbone,
    bindings: &Bindings,
    ex: &TrainExample,
    schedule: &NoiseSchedule,
    gate: Gate,
) -> Result<Var> {
    let rows = ex.x0.shape()[0];
    let weights = loss_weights(rows, ex.x0.shape()[1], &ex.mask)?;
    let xt = noised_input(ex, schedule)?;
    let x = tape.constant(xt);
    let pred = model.forward(tape, bindings, x, &ex.positions, &ex.text, ex.t, gate)?;
    weighted_error(tape, pred, &ex.eps, &weights)
}

/// `u + scale·(c − u)`.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, scale: f32) -> Result<Tensor> {
    if uncond.shape() != cond.shape() {
        return Err(Error::shape("cfg_combine", uncond.shape(), cond.shape()));
    }
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| u + scale * (c - u))
        .collect();
    Tensor::new(uncond.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            guidance_scale: 6.0,
            seed: 0,
        }
    }
}

/// Evenly strided ascending subset of `0..total` with `steps` entries.
pub fn timestep_subset(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!(
            "sampling steps {steps} must lie in 1..={total}"
        )));
    }
    Ok((0..steps).map(|i| i * total / steps).collect())
}

/// Coefficients of one ancestral update from `t` to `prev` (`None` = clean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub sqrt_recip_ab: f64,
    pub sqrt_recipm1_ab: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub sigma: f64,
}

pub fn step_coefficients(schedule: &NoiseSchedule, t: usize, prev: Option<usize>) -> StepCoefficients {
    let ab = schedule.alpha_bar_at(t) as f64;
    let ab_prev = prev.map_or(1.0, |p| schedule.alpha_bar_at(p) as f64);
    let beta = 1.0 - ab / ab_prev;
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    StepCoefficients {
        sqrt_recip_ab: (1.0 / ab).sqrt(),
        sqrt_recipm1_ab: (1.0 / ab - 1.0).sqrt(),
        coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
        coef_xt: (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        sigma: if prev.is_some() { var.max(0.0).sqrt() } else { 0.0 },
    }
}

/// Posterior mean from the predicted clean sample (clipped to `[-1, 1]`)
/// plus `σ·z` when `noise` is given.
pub fn ddpm_update(x: &[f32], eps: &[f32], c: &StepCoefficients, noise: Option<&[f32]>) -> Vec<f32> {
    x.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&xt, &e))| {
            let x0 = (c.sqrt_recip_ab * xt as f64 - c.sqrt_recipm1_ab * e as f64).clamp(-1.0, 1.0);
            let mut v = c.coef_x0 * x0 + c.coef_xt * xt as f64;
            if let Some(z) = noise {
                v += c.sigma * z[i] as f64;
            }
            v as f32
        })
        .collect()
}

/// Conditioning inputs of a sampling run.
pub struct SampleRequest<'a> {
    pub text: &'a TextTokens,
    pub mask: ConditionMask,
    /// Clean model-space tokens; read only at fixed segments.
    pub cond_x0: Option<&'a Tensor>,
    pub positions: &'a [[usize; 3]],
    pub shape: [usize; 2],
}

/// Ancestral sampling in token space with an explicit motion gate.
pub fn sample_tokens(
    model: &Backbone,
    req: &SampleRequest<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    gate: Gate,
) -> Result<Tensor> {
    let fixed_any = Segment::ALL.iter().any(|&s| req.mask.is_fixed(s));
    let cond = match (fixed_any, req.cond_x0) {
        (true, None) => {
            return Err(Error::MissingPrerequisite(format!(
                "mask {} needs conditioning data for its fixed segments",
                req.mask.code()
            )))
        }
        (_, Some(c)) if c.shape() != req.shape => {
            return Err(Error::shape("conditioning tokens", c.shape(), &req.shape))
        }
        (_, c) => c,
    };
    let ts = timestep_subset(schedule.steps(), cfg.steps)?;
    let null = null_tokens(req.text.block_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = gaussian(&req.shape, &mut rng);
    if let Some(c) = cond {
        x = apply_condition(&x, c, &req.mask)?;
    }
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let prev = if i > 0 { Some(ts[i - 1]) } else { None };
        let e_c = model.predict(&x, req.positions, req.text, t, gate)?;
        let e_u = model.predict(&x, req.positions, &null, t, gate)?;
        let eps = cfg_combine(&e_u, &e_c, cfg.guidance_scale)?;
        let coef = step_coefficients(schedule, t, prev);
        let noise = prev.map(|_| gaussian(&req.shape, &mut rng));
        let next = ddpm_update(x.data(), eps.data(), &coef, noise.as_ref().map(|n| n.data()));
        x = Tensor::new(&req.shape, next)?;
        if let Some(c) = cond {
            x = apply_condition(&x, c, &req.mask)?;
        }
    }
    Ok(x)
}

/// Generates or completes a layer quadruple. The motion adapter is always
/// off; fixed segments of the result are copies of `cond`.
pub fn sample(
    model: &Backbone,
    prompts: &[String; 3],
    mask: ConditionMask,
    cond: Option<&LayerVideos>,
    dims: (usize, usize, usize),
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<LayerVideos> {
    sample_with_gate(model, prompts, mask, cond, dims, schedule, cfg, Gate::Off)
}

/// [`sample`] with an explicit motion gate, for probing the motion adapter.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_gate(
    model: &Backbone,
    prompts: &[String; 3],
    mask: ConditionMask,
    cond: Option<&LayerVideos>,
    dims: (usize, usize, usize),
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    gate: Gate,
) -> Result<LayerVideos> {
    let mcfg = model.config();
    let text = tokenize_prompts(prompts, model.vocab(), mcfg.text_len)?;
    let (f, h, w) = dims;
    let template = match cond {
        Some(c) => {
            if c.dims() != dims {
                return Err(Error::shape("conditioning video", &[f, h, w], &{
                    let d = c.dims();
                    [d.0, d.1, d.2]
                }));
            }
            encode_layers(c, mcfg.patch)?
        }
        None => encode_layers(&blank_layers(f, h, w), mcfg.patch)?,
    };
    let shape = [template.len(), mcfg.patch_dim()];
    let req = SampleRequest {
        text: &text,
        mask,
        cond_x0: cond.map(|_| &template.tokens),
        positions: &template.position_ids,
        shape,
    };
    let tokens = sample_tokens(model, &req, schedule, cfg, gate)?;
    let mut out = decode_layers(&template.with_tokens(tokens)?)?;
    if let Some(c) = cond {
        for s in Segment::ALL {
            if mask.is_fixed(s) {
                *out.get_mut(s) = c.get(s).clone();
            }
        }
    }
    Ok(out)
}

/// All-zero layer videos of the given extent.
pub fn blank_layers(f: usize, h: usize, w: usize) -> LayerVideos {
    LayerVideos {
        foreground: Video::filled(f, h, w, 3, 0.0),
        alpha: Video::filled(f, h, w, 1, 0.0),
        background: Video::filled(f, h, w, 3, 0.0),
        blended: Video::filled(f, h, w, 3, 0.0),
    }
}

/// Record of how a sample file was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub seed: u64,
    pub steps: usize,
    pub scale: f32,
    pub mask: ConditionMask,
    pub prompts: [String; 3],
}

impl Sidecar {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "mask={}", self.mask.code());
        for (name, p) in ["prompt_fg", "prompt_bg", "prompt_blended"].iter().zip(&self.prompts) {
            let _ = writeln!(s, "{name}={p}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}
