//! Minimal neural-network engine.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;

pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use loss::softmax_cross_entropy;
pub use model::{
    loss_and_grad, loss_and_grad_with, model_forward, BatchLossReport, ForwardPass, Gradients, Layer, LayerOp,
    ModelKind, ModelParams,
};
pub use optim::{sgd_momentum_step, OptimizerState};
