//! Central finite differences over every scalar parameter.

use crate::error::{Error, Result};

use super::model::{Gradients, ModelParams};

/// `(L(w+ε) − L(w−ε)) / 2ε` for each parameter entry in turn.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &ModelParams, eps: f64) -> Result<Gradients>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut grads = params.zero_grads();
    let counts: Vec<usize> = params.tensors().map(|t| t.len()).collect();
    for (t, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let original = entry(&mut work, t, i);
            set(&mut work, t, i, original + eps);
            let plus = loss_fn(&work)?;
            set(&mut work, t, i, original - eps);
            let minus = loss_fn(&work)?;
            set(&mut work, t, i, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss while perturbing tensor {t}, entry {i}")));
            }
            grads.0[t].data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

fn entry(p: &mut ModelParams, t: usize, i: usize) -> f64 {
    p.tensors_mut().nth(t).expect("tensor index").data()[i]
}

fn set(p: &mut ModelParams, t: usize, i: usize, v: f64) {
    p.tensors_mut().nth(t).expect("tensor index").data_mut()[i] = v;
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
///
/// `floor` keeps entries whose true gradient is near zero from being judged
/// on finite-difference round-off alone.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients, floor: f64) -> f64 {
    analytic
        .0
        .iter()
        .zip(&numeric.0)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
