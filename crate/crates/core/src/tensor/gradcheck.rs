use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_error: f32,
    pub max_abs_error: f32,
    pub passed: bool,
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `h`.
///
/// The error is measured relative to the infinity norm of the gradient so
/// that near-zero components do not amplify `f32` round-off.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32, tol: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let x = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let loss = f(&mut tape, vx)?;
    tape.backward(loss)?;
    let analytic: Vec<f32> = tape
        .grad(vx)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar_value(out) as f64)
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone().with_requires_grad(false);
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + h;
        let lo = orig - h;
        probe.data_mut()[i] = hi;
        let f_hi = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let max_abs = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f32, |m, (a, n)| m.max((a - n).abs()));
    let rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(GradCheckReport {
        max_rel_error: rel,
        max_abs_error: max_abs,
        passed: rel < tol,
    })
}
