use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{Gradients, ModelParams};

/// Heavy-ball SGD state: `v ← μ·v + g`, `w ← w − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    /// Zero velocity shaped like `params`.
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Argument(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            velocity: params.zero_grads().0,
            learning_rate,
            momentum,
        })
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.data_mut().fill(0.0);
        }
    }
}

/// One momentum step applied in place.
pub fn sgd_momentum_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let n = params.tensors().count();
    if grads.0.len() != n || state.velocity.len() != n {
        return Err(Error::dim("grads", "parameter count mismatch"));
    }
    let shapes_ok = params
        .tensors()
        .zip(&grads.0)
        .zip(&state.velocity)
        .all(|((p, g), v)| p.same_shape(g) && p.same_shape(v));
    if !shapes_ok {
        return Err(Error::dim("grads", "gradient shapes do not mirror parameter shapes"));
    }
    let (mu, lr) = (state.momentum, state.learning_rate);
    for ((p, g), v) in params.tensors_mut().zip(&grads.0).zip(&mut state.velocity) {
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *w -= lr * *vv;
        }
    }
    Ok(())
}
