//! Whole-run configuration as one TOML document.
//!
//! Every section and field is optional; missing values take the defaults
//! below and unknown keys are rejected. [`RunConfig::to_toml`] renders the
//! fully resolved configuration.
//!
//! ```toml
//! seed = 0
//! [backbone]        # d_model 64, n_blocks 6, n_heads 4, patch 4, text_len 16,
//!                   # max_frames 16, max_patches 64, lora_rank 4, timesteps 100
//! [schedule]        # beta_start 1e-3, beta_end 0.2 (linear over backbone.timesteps)
//! [data]            # frames 4, height 16, width 16, samples_per_tier 64, ...
//! [stages.base]     # lr 1e-4, steps 2000, batch_size 1, prompt_drop 0.1
//! [stages.motion]   # lr 1e-3, steps 500
//! [stages.content]  # lr 5e-3, steps 1000
//! [sampler]         # steps 20, guidance_scale 6.0, seed 0
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diffusion::{build_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::lora::Stage;
use crate::synthdata::DataConfig;
use crate::trainer::{MaskMix, StageConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: f32,
    pub beta_end: f32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stages {
    pub base: StageConfig,
    pub motion: StageConfig,
    pub content: StageConfig,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            base: StageConfig::for_stage(Stage::Base),
            motion: StageConfig::for_stage(Stage::Motion),
            content: StageConfig::for_stage(Stage::Content),
        }
    }
}

impl Stages {
    pub fn get(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Base => &self.base,
            Stage::Motion => &self.motion,
            Stage::Content => &self.content,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Base => &mut self.base,
            Stage::Motion => &mut self.motion,
            Stage::Content => &mut self.content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRunConfig")]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub stages: Stages,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            stages: Stages::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

// Stage sections are patches over the per-stage defaults, so a file that
// only sets `[stages.motion] lr` keeps the motion step budget.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatch {
    lr: Option<f32>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    prompt_drop: Option<f64>,
    masks: Option<MaskMix>,
}

impl StagePatch {
    fn apply(self, stage: Stage) -> StageConfig {
        let d = StageConfig::for_stage(stage);
        StageConfig {
            stage,
            lr: self.lr.unwrap_or(d.lr),
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            prompt_drop: self.prompt_drop.unwrap_or(d.prompt_drop),
            masks: self.masks.unwrap_or(d.masks),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatches {
    #[serde(default)]
    base: StagePatch,
    #[serde(default)]
    motion: StagePatch,
    #[serde(default)]
    content: StagePatch,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    backbone: BackboneConfig,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    stages: StagePatches,
    #[serde(default)]
    sampler: SamplerConfig,
}

impl TryFrom<RawRunConfig> for RunConfig {
    type Error = Error;

    fn try_from(raw: RawRunConfig) -> Result<Self> {
        let cfg = RunConfig {
            seed: raw.seed,
            backbone: raw.backbone,
            schedule: raw.schedule,
            data: raw.data,
            stages: Stages {
                base: raw.stages.base.apply(Stage::Base),
                motion: raw.stages.motion.apply(Stage::Motion),
                content: raw.stages.content.apply(Stage::Content),
            },
            sampler: raw.sampler,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.validate()?;
        for s in [Stage::Base, Stage::Motion, Stage::Content] {
            self.stages.get(s).validate()?;
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.backbone.timesteps {
            return Err(Error::Config(format!(
                "sampler steps must lie in 1..={}",
                self.backbone.timesteps
            )));
        }
        self.noise_schedule().map(|_| ())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.backbone.timesteps, self.schedule.beta_start, self.schedule.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), self.to_toml())?;
        Ok(())
    }
}
