//! Three-stage optimization: base training on coarse data, the gated motion
//! adapter on frozen data, then the content adapter on the joint mixture.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, RngState,
    CHECKPOINT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::diffusion::{encode_layers, gaussian, masked_loss, NoiseSchedule, TrainExample};
use crate::error::{Error, Result};
use crate::layerpack::{ConditionMask, LayerQuadruple};
use crate::lora::{attach_adapters, select_trainable, Family, Gate, Stage};
use crate::synthdata::Tier;
use crate::tensor::{Tape, Tensor};
use crate::textcond::{null_tokens, tokenize_prompts, TextTokens};

/// Probabilities of the generation, fg-conditioned, bg-conditioned and
/// decomposition masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskMix {
    pub generation: f64,
    pub fg_cond: f64,
    pub bg_cond: f64,
    pub decompose: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        MaskMix {
            generation: 0.7,
            fg_cond: 0.1,
            bg_cond: 0.1,
            decompose: 0.1,
        }
    }
}

impl MaskMix {
    fn weights(&self) -> [(f64, ConditionMask); 4] {
        [
            (self.generation, ConditionMask::generation()),
            (self.fg_cond, ConditionMask::foreground_conditioned()),
            (self.bg_cond, ConditionMask::background_conditioned()),
            (self.decompose, ConditionMask::decomposition()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|(p, _)| !(*p >= 0.0)) || w.iter().map(|(p, _)| p).sum::<f64>() <= 0.0 {
            return Err(Error::Config("mask mix needs non-negative weights with a positive sum".into()));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionMask {
        let w = self.weights();
        let total: f64 = w.iter().map(|(p, _)| p).sum();
        let mut u = rng.random::<f64>() * total;
        for (p, m) in w {
            if u < p {
                return m;
            }
            u -= p;
        }
        // rounding left u at the top of the range
        w.iter()
            .rev()
            .find(|(p, _)| *p > 0.0)
            .map_or(ConditionMask::generation(), |(_, m)| *m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    #[serde(skip_serializing)]
    pub stage: Stage,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub prompt_drop: f64,
    pub masks: MaskMix,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::for_stage(Stage::Base)
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (lr, steps) = match stage {
            Stage::Base => (1e-4, 2000),
            Stage::Motion => (1e-3, 500),
            Stage::Content => (5e-3, 1000),
        };
        StageConfig {
            stage,
            lr,
            steps,
            batch_size: 1,
            prompt_drop: 0.1,
            masks: MaskMix::default(),
        }
    }

    /// Dataset tier the stage trains on.
    pub fn tier(&self) -> Tier {
        match self.stage {
            Stage::Base => Tier::Coarse,
            Stage::Motion => Tier::Frozen,
            Stage::Content => Tier::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "stage {}: lr must be positive and batch_size at least 1",
                self.stage.number()
            )));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop) {
            return Err(Error::Config("prompt_drop must lie in [0, 1]".into()));
        }
        self.masks.validate()
    }
}

/// Motion gate for a sample of the given kind in `stage`.
pub fn gate_policy(stage: Stage, frozen: bool) -> Gate {
    match stage {
        Stage::Base => Gate::Off,
        Stage::Motion => Gate::On,
        Stage::Content if frozen => Gate::On,
        Stage::Content => Gate::Off,
    }
}

/// A quadruple prepared for the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub x0: Tensor,
    pub positions: Vec<[usize; 3]>,
    pub text: TextTokens,
    pub frozen: bool,
}

impl TrainSample {
    pub fn new(q: &LayerQuadruple, frozen: bool, model: &Backbone) -> Result<Self> {
        let cfg = model.config();
        let seq = encode_layers(&q.videos, cfg.patch)?;
        if seq.frames > cfg.max_frames || seq.grid.0 * seq.grid.1 > cfg.max_patches {
            return Err(Error::Config(format!(
                "{} frames of {}x{} patches exceed the model's {} frames / {} patches",
                seq.frames, seq.grid.0, seq.grid.1, cfg.max_frames, cfg.max_patches
            )));
        }
        Ok(TrainSample {
            x0: seq.tokens,
            positions: seq.position_ids,
            text: tokenize_prompts(&q.prompts, model.vocab(), cfg.text_len)?,
            frozen,
        })
    }
}

pub fn prepare_samples(data: &[(LayerQuadruple, bool)], model: &Backbone) -> Result<Vec<TrainSample>> {
    data.iter().map(|(q, f)| TrainSample::new(q, *f, model)).collect()
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: f32,
    pub gate: Gate,
    pub mask: ConditionMask,
    pub lr: f32,
    /// Dataset indices of the batch.
    pub samples: Vec<usize>,
}

pub const LOG_HEADER: &str = "step,stage,loss,gate,mask,lr,samples";

pub fn render_log(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let idx: Vec<String> = r.samples.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.stage.number(),
            r.loss,
            r.gate.alpha(),
            r.mask.code(),
            r.lr,
            idx.join(";")
        );
    }
    s
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    fs::write(path, render_log(rows))?;
    Ok(())
}

/// Loss and summed gradients of one example over the trainable keys.
fn example_grads(
    model: &Backbone,
    trainable: &BTreeSet<String>,
    ex: &TrainExample,
    schedule: &NoiseSchedule,
    gate: Gate,
) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, trainable);
    let loss = masked_loss(&mut tape, model, &b, ex, schedule, gate)?;
    let value = tape.scalar_value(loss);
    let mut grads = BTreeMap::new();
    if !trainable.is_empty() {
        tape.backward(loss)?;
        for k in trainable {
            let v = b.var(k)?;
            let g = match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; model.params().get(k)?.numel()],
            };
            grads.insert(k.clone(), g);
        }
    }
    Ok((value, grads))
}

/// Batch-mean loss and gradients. Examples may be spread over `threads`
/// workers; the reduction runs in example order, so the result does not
/// depend on the thread count.
pub fn batch_grads(
    model: &Backbone,
    trainable: &BTreeSet<String>,
    batch: &[TrainExample],
    schedule: &NoiseSchedule,
    gate: Gate,
    threads: usize,
) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let threads = threads.clamp(1, batch.len().max(1));
    let results: Vec<Result<(f32, BTreeMap<String, Vec<f32>>)>> = if threads == 1 {
        batch
            .iter()
            .map(|ex| example_grads(model, trainable, ex, schedule, gate))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|ex| example_grads(model, trainable, ex, schedule, gate))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let scale = 1.0 / batch.len() as f32;
    let mut loss = 0.0f64;
    let mut total: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        loss += l as f64;
        for (k, v) in g {
            match total.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(k, v);
                }
            }
        }
    }
    for v in total.values_mut() {
        v.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(((loss / batch.len() as f64) as f32, total))
}

/// Model, optimizer and RNG of one stage in progress.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub model: Backbone,
    pub stage: Stage,
    pub step: usize,
    pub adam: AdamState,
    pub seed: u64,
    rng: ChaCha8Rng,
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ (0x5EED_0000_0000_0000 | stage.number() as u64)
}

impl TrainSession {
    /// Begins `stage`. Stage 1 starts from `base`; later stages continue a
    /// checkpoint of the finished previous stage and attach that stage's
    /// adapters. A checkpoint of an unfinished `stage` is resumed.
    pub fn begin(stage: Stage, seed: u64, base: Option<Backbone>, prior: Option<Checkpoint>) -> Result<Self> {
        if let Some(ck) = &prior {
            if ck.stage == stage && !ck.finished {
                let rng = match &ck.rng {
                    Some(r) => r.restore()?,
                    None => return Err(Error::format("resumable checkpoint lacks RNG state")),
                };
                return Ok(TrainSession {
                    model: ck.model.clone(),
                    stage,
                    step: ck.step,
                    adam: ck.adam.clone().unwrap_or_default(),
                    seed: ck.seed,
                    rng,
                });
            }
        }
        let mut model = match (stage, prior) {
            (Stage::Base, None) => base.ok_or_else(|| {
                Error::MissingPrerequisite("stage 1 needs an initial model".into())
            })?,
            (Stage::Base, Some(ck)) => ck.model,
            (s, None) => {
                return Err(Error::MissingPrerequisite(format!(
                    "stage {} needs the checkpoint of a finished stage {}",
                    s.number(),
                    s.number() - 1
                )))
            }
            (s, Some(ck)) => {
                if ck.stage.number() + 1 != s.number() || !ck.finished {
                    return Err(Error::MissingPrerequisite(format!(
                        "stage {} needs the checkpoint of a finished stage {}, got stage {}{}",
                        s.number(),
                        s.number() - 1,
                        ck.stage.number(),
                        if ck.finished { "" } else { " (unfinished)" }
                    )));
                }
                ck.model
            }
        };
        let mut init = ChaCha8Rng::seed_from_u64(stage_seed(seed, stage) ^ 0xADA9);
        match stage {
            Stage::Base => {}
            Stage::Motion => {
                attach_adapters(&mut model, Family::Motion, &mut init);
            }
            Stage::Content => {
                attach_adapters(&mut model, Family::Content, &mut init);
            }
        }
        Ok(TrainSession {
            model,
            stage,
            step: 0,
            adam: AdamState::default(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(stage_seed(seed, stage)),
        })
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        select_trainable(&self.model, self.stage)
    }

    /// Draws the examples of the next batch; every member shares one gate.
    pub fn draw_batch(
        &mut self,
        cfg: &StageConfig,
        data: &[TrainSample],
        schedule: &NoiseSchedule,
    ) -> (Vec<TrainExample>, Gate, ConditionMask, Vec<usize>) {
        let rng = &mut self.rng;
        let first = rng.random_range(0..data.len());
        let gate = gate_policy(self.stage, data[first].frozen);
        let group: Vec<usize> = (0..data.len())
            .filter(|&i| gate_policy(self.stage, data[i].frozen) == gate)
            .collect();
        let mut idx = vec![first];
        while idx.len() < cfg.batch_size {
            idx.push(group[rng.random_range(0..group.len())]);
        }
        let mask = cfg.masks.draw(rng);
        let examples = idx
            .iter()
            .map(|&i| {
                let s = &data[i];
                let t = rng.random_range(0..schedule.steps());
                let text = if rng.random::<f64>() < cfg.prompt_drop {
                    null_tokens(s.text.block_len)
                } else {
                    s.text.clone()
                };
                let eps = gaussian(s.x0.shape(), rng);
                TrainExample {
                    x0: s.x0.clone(),
                    positions: s.positions.clone(),
                    text,
                    mask,
                    t,
                    eps,
                }
            })
            .collect();
        (examples, gate, mask, idx)
    }

    /// Runs until `cfg.steps` steps are done or `limit` further steps have
    /// been taken.
    pub fn run(
        &mut self,
        cfg: &StageConfig,
        data: &[TrainSample],
        schedule: &NoiseSchedule,
        threads: usize,
        limit: Option<usize>,
    ) -> Result<Vec<LogRow>> {
        cfg.validate()?;
        if cfg.stage != self.stage {
            return Err(Error::Config(format!(
                "stage config is for stage {}, session is stage {}",
                cfg.stage.number(),
                self.stage.number()
            )));
        }
        if data.is_empty() {
            return Err(Error::MissingPrerequisite(format!(
                "stage {} has no training data",
                self.stage.number()
            )));
        }
        let trainable = self.trainable();
        let mut log = Vec::new();
        let end = limit.map_or(cfg.steps, |l| (self.step + l).min(cfg.steps));
        while self.step < end {
            let (batch, gate, mask, idx) = self.draw_batch(cfg, data, schedule);
            self.model.set_gate(gate);
            let (loss, grads) = batch_grads(&self.model, &trainable, &batch, schedule, gate, threads)?;
            adam_step(self.model.params_mut(), &grads, &mut self.adam, cfg.lr)?;
            self.step += 1;
            if self.step % 100 == 0 || self.step == 1 {
                info!("stage {} step {} loss {loss:.5}", self.stage.number(), self.step);
            } else {
                debug!("stage {} step {} loss {loss:.5}", self.stage.number(), self.step);
            }
            log.push(LogRow {
                step: self.step,
                stage: self.stage,
                loss,
                gate,
                mask,
                lr: cfg.lr,
                samples: idx,
            });
        }
        self.model.set_gate(Gate::Off);
        Ok(log)
    }

    pub fn checkpoint(&self, steps_planned: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            stage: self.stage,
            step: self.step,
            finished: self.step >= steps_planned,
            seed: self.seed,
            rng: Some(RngState::capture(&self.rng)),
            adam: Some(self.adam.clone()),
        }
    }
}

/// Mean masked loss over fixed draws of (sample, t, ε) with the generation
/// mask and real prompts; a stable yardstick across training steps.
pub fn probe_loss(
    model: &Backbone,
    data: &[TrainSample],
    schedule: &NoiseSchedule,
    gate: Gate,
    draws: usize,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = BTreeSet::new();
    let mut total = 0.0f64;
    for d in 0..draws {
        let s = &data[d % data.len()];
        let ex = TrainExample {
            x0: s.x0.clone(),
            positions: s.positions.clone(),
            text: s.text.clone(),
            mask: ConditionMask::generation(),
            t: rng.random_range(0..schedule.steps()),
            eps: gaussian(s.x0.shape(), &mut rng),
        };
        total += example_grads(model, &none, &ex, schedule, gate)?.0 as f64;
    }
    Ok((total / draws as f64) as f32)
}
