//! Differentiable dense arrays with a reverse-mode tape.

mod array;
pub mod gradcheck;
pub mod nn;
mod ops;
mod tape;

pub use array::{numel, DType, Float, Tensor};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("row {0} has no feasible entry")]
    AllMasked(usize),
    #[error("softmax temperature must be positive")]
    NonPositiveTemperature,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding dimension {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any tracked input")]
    DetachedLoss,
}
