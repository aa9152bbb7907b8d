//! Differentiable dense-tensor primitives with hand-written backward
//! passes, plus the Adam optimizer and a finite-difference gradient
//! checker. Everything is generic over [`Scalar`]; the shipped pipeline
//! instantiates `f64`.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod random;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{grad_check, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use random::gaussian_tensor;
pub use scalar::Scalar;
pub use tape::{Gradients, ParamBindings, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

/// Layer-norm epsilon (BERT-family convention).
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("attention row has no valid key")]
    AllMaskedRow,
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("vector norm too small to normalize")]
    DegenerateNorm,
}
