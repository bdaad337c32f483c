//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Non-finite value encountered where finite numbers are required.
    #[error("non-finite value: {0}")]
    Numerics(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Covariance factorization failed even after jitter.
    #[error("covariance of dimension {0} not positive definite after jitter")]
    SingularCovariance(usize),

    /// Batch statistics are undefined for this batch size.
    #[error("batch of size {0} cannot provide batch statistics")]
    DegenerateBatch(usize),

    /// Corrupt or mismatched on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Supervised pretraining failed to reach the accuracy floor.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// The query auditor observed a protocol violation.
    #[error("audit violation: {0}")]
    Audit(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
