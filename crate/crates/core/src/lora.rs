//! Low-rank adapters on the Q/K/V projections of the trainable blocks.
//!
//! Two families share the same shape: the motion adapter is scaled by a
//! binary gate α (on for frozen-video data, off at inference), the content
//! adapter is always active. For an input row `z` the adapted projection is
//! `W z + α·A_m B_mᵀ z + A_c B_cᵀ z`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const ADAPTER_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Motion,
    Content,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Motion => "motion",
            Family::Content => "content",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

/// Host of one adapter: (block, projection, family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdapterKey {
    pub block: usize,
    pub projection: Projection,
    pub family: Family,
}

impl AdapterKey {
    pub fn prefix(&self) -> String {
        format!(
            "lora.{}.{}.{}",
            self.block,
            self.projection.name(),
            self.family.name()
        )
    }

    pub fn a_key(&self) -> String {
        format!("{}.a", self.prefix())
    }

    pub fn b_key(&self) -> String {
        format!("{}.b", self.prefix())
    }
}

impl fmt::Display for AdapterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

/// A rank-`r` pair with `A: [d_out, r]`, `B: [d_in, r]`; contributes
/// `A Bᵀ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub host: AdapterKey,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init<R: Rng>(host: AdapterKey, d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, ADAPTER_INIT_STD).expect("valid std");
        LoraAdapter {
            a: Tensor::from_fn(&[d_out, rank], |_| normal.sample(rng)),
            b: Tensor::zeros(&[d_in, rank]),
            host,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Binary motion gate α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Gate {
    #[default]
    Off,
    On,
}

impl Gate {
    pub fn from_alpha(alpha: f32) -> Result<Self> {
        if alpha == 0.0 {
            Ok(Gate::Off)
        } else if alpha == 1.0 {
            Ok(Gate::On)
        } else {
            Err(Error::invalid(format!("motion gate must be 0 or 1, got {alpha}")))
        }
    }

    pub fn alpha(self) -> u8 {
        match self {
            Gate::Off => 0,
            Gate::On => 1,
        }
    }
}

/// Adapter tape variables `(A, B)`.
pub type AdapterVars = (Var, Var);

fn low_rank(tape: &mut Tape, z: Var, (a, b): AdapterVars, d_out: usize) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    let d_in = tape.shape(z).get(1).copied().unwrap_or(0);
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sb[0] != d_in || sa[0] != d_out {
        return Err(Error::shape("lora adapter", &sa, &sb));
    }
    let zb = tape.matmul(z, b)?;
    tape.matmul_t(zb, a)
}

/// `z·W + bias + α·(z B_m) A_mᵀ + (z B_c) A_cᵀ` in row form, where `W` is
/// stored `[d_in, d_out]`.
pub fn adapted_projection(
    tape: &mut Tape,
    z: Var,
    w: Var,
    bias: Option<Var>,
    motion: Option<AdapterVars>,
    content: Option<AdapterVars>,
    gate: Gate,
) -> Result<Var> {
    let mut out = tape.matmul(z, w)?;
    if let Some(b) = bias {
        out = tape.add(out, b)?;
    }
    let d_out = tape.shape(w)[1];
    if let (Gate::On, Some(m)) = (gate, motion) {
        let delta = low_rank(tape, z, m, d_out)?;
        out = tape.add(out, delta)?;
    }
    if let Some(c) = content {
        let delta = low_rank(tape, z, c, d_out)?;
        out = tape.add(out, delta)?;
    }
    Ok(out)
}

/// Training stage of the three-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Base = 1,
    Motion = 2,
    Content = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Base),
            2 => Ok(Stage::Motion),
            3 => Ok(Stage::Content),
            _ => Err(Error::invalid(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

/// Attaches zero-initialized adapters of `family` to Q/K/V of every
/// designated block. Already-present adapters are left untouched.
pub fn attach_adapters<R: Rng>(model: &mut Backbone, family: Family, rng: &mut R) -> Vec<AdapterKey> {
    let cfg = model.config().clone();
    let mut added = Vec::new();
    for block in cfg.designated_blocks() {
        for projection in Projection::ALL {
            let host = AdapterKey {
                block,
                projection,
                family,
            };
            if model.params().contains(&host.a_key()) {
                continue;
            }
            let ad = LoraAdapter::init(host, cfg.d_model, cfg.d_model, cfg.lora_rank, rng);
            model.params_mut().insert(host.a_key(), ad.a);
            model.params_mut().insert(host.b_key(), ad.b);
            added.push(host);
        }
    }
    added
}

/// Parameter keys updated in `stage`; everything else is frozen.
pub fn select_trainable(model: &Backbone, stage: Stage) -> BTreeSet<String> {
    let designated: Vec<String> = model
        .config()
        .designated_blocks()
        .map(|b| format!("blocks.{b}."))
        .collect();
    model
        .params()
        .keys()
        .filter(|k| match stage {
            Stage::Base => {
                if k.starts_with("lora.") {
                    false
                } else if k.starts_with("blocks.") {
                    designated.iter().any(|p| k.starts_with(p.as_str()))
                } else {
                    true
                }
            }
            Stage::Motion => k.starts_with("lora.") && k.contains(".motion."),
            Stage::Content => k.starts_with("lora.") && k.contains(".content."),
        })
        .cloned()
        .collect()
}

/// Sets the model-wide motion gate; only 0 and 1 are accepted.
pub fn set_gate(model: &mut Backbone, alpha: f32) -> Result<()> {
    model.set_gate(Gate::from_alpha(alpha)?);
    Ok(())
}
