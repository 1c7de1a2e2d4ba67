//! Central-difference validation of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between tape gradients and central differences
/// over every element of every parameter. The relative error of one
/// element is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` builds a scalar from the parameter vars on the given tape; it is
/// called once on a recording tape and twice per element on no-grad
/// tapes.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(&format!("p{i}"), p.clone()))
        .collect();
    let loss = f(&tape, &vars)?;
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
