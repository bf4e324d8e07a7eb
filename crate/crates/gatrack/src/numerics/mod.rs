//! Core differentiable primitives: tensors, per-cell linear maps, batch
//! normalization, masked softmax, and the finite-difference gradient checker
//! that every differentiable op in the crate must satisfy.

mod batchnorm;
mod gradcheck;
mod ops;
mod tensor;

pub use batchnorm::{batchnorm, BatchNorm, BnCache, BnGrads};
pub use gradcheck::{
    grad_check, BackwardResult, BatchNormOp, Conv1x1Op, DiffOp, GradCheckReport, MaskedSoftmaxOp,
};
pub use ops::{
    conv1x1, masked_softmax, masked_softmax_backward, relu, relu_backward, Conv1x1, Conv1x1Cache,
    Conv1x1Grads,
};
pub use tensor::Tensor;

/// Forward-pass mode. Train uses batch statistics in normalization layers,
/// Infer uses the recorded running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
