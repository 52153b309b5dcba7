use std::collections::BTreeMap;

use crate::backbone::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPSILON: f32 = 1e-8;

/// Adam moments for the parameters it has updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// Bias-corrected Adam update of every parameter named in `grads`, in key
/// order. Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (k, g) in grads {
        let p = params.get(k)?;
        if p.numel() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(k.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (k, g) in grads {
        let p = params.get_mut(k)?;
        let m = state.m.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] as f64 / bc1;
            let vh = v[i] as f64 / bc2;
            *x -= (lr as f64 * mh / (vh.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}
