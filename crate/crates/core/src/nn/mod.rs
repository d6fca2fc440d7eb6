//! Differentiable building blocks with explicit forward caches and
//! backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients into [`Param::grad`] during `backward`.
//! Gradients accumulate until [`Param::zero_grad`] is called.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod norm;
mod param;

pub use activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{LayerNorm, WeightNormLinear};
pub use param::{join, Param, ParamVisitor};

/// Whether batch statistics are computed from the batch (and running
/// estimates updated) or read from the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
