//! Finite-difference gradient oracle.
//!
//! The oracle is intentionally independent of the tape's adjoint rules: it
//! only calls the forward evaluation, so a wrong adjoint shows up as a large
//! relative error rather than agreeing with itself.

use crate::error::{Error, Result};
use crate::tensor::{Id, Tape, Tensor};

/// A differentiable scalar function built on a fresh tape per call: receives
/// the tape and the registered input leaf, returns the scalar output id.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, Id) -> Result<Id>;

/// Central differences of `f` at `x`, one entry per coordinate.
pub fn central_difference(f: ScalarFn, x: &Tensor, step: f64) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let eval = |pt: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(pt.clone());
        let out = f(&mut tape, id)?;
        tape.value(out).item()
    };
    // determinism probe: the same point must evaluate identically twice
    let probe = eval(x)?;
    if eval(x)? != probe {
        return Err(Error::Oracle(
            "function is not deterministic under repeated evaluation".into(),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        out.push((eval(&plus)? - eval(&minus)?) / (2.0 * step));
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Runs `f` forward and backward at `x` and compares the tape gradient with
/// central differences; returns the max relative error.
pub fn finite_diff_check(f: ScalarFn, x: &Tensor, step: f64) -> Result<f64> {
    let numeric = central_difference(f, x, step)?;
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, id)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(id)
        .ok_or_else(|| Error::Contract("input does not reach the loss".into()))?;
    Ok(max_rel_err(analytic.data(), &numeric))
}
