//! Library behind the `xmodal` tool: a mid-fusion cross-modal matcher that
//! scores the relevance of a search phrase to an image represented by
//! detected-object features, trained as a binary classifier, with
//! early-fusion and contrastive dual-encoder baselines and an AUC/F1
//! evaluation harness.
//!
//! The numerics core is generic over the scalar type ([`numerics::Scalar`]);
//! the aliases below pin the shipped `f64` pipeline, which is what the file
//! formats and gradient-check tolerances are specified for.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod train;

pub use checkpoint::CheckpointError;
pub use data::DataError;
pub use metrics::MetricsError;
pub use model::ModelError;
pub use numerics::NumericsError;
pub use tokenizer::TokenizerError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scalar used by the shipped pipeline and all file formats.
pub type Real = f64;
pub type Tensor = numerics::Tensor<Real>;
pub type Tape = numerics::Tape<Real>;
pub type ParamStore = numerics::ParamStore<Real>;
pub type AdamState = numerics::AdamState<Real>;
pub type Matcher = model::CrossModalMatcher<Real>;
pub type EarlyFusion = baselines::EarlyFusionMatcher<Real>;
pub type Dual = baselines::DualEncoder<Real>;
pub type Model = train::AnyModel<Real>;
