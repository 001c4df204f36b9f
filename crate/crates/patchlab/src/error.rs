//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. The CLI maps each
//! variant to a stable one-line category string so scripts can branch on
//! failures without parsing prose.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation. Carries both shapes.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward op produced NaN or Inf from finite inputs.
    #[error("{op}: non-finite value produced (index {index})")]
    NonFinite { op: &'static str, index: usize },

    /// Autodiff misuse: non-scalar loss, double backward, missing grads.
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// Invalid model / patch geometry (e.g. patch size not dividing image).
    #[error("config: {0}")]
    Config(String),

    /// Dataset synthesis or parsing failure.
    #[error("data: {0}")]
    Data(String),

    /// Training aborted (NaN loss guard and friends).
    #[error("train: {0}")]
    Train(String),

    /// Experiment harness misuse (insufficient records, nonpositive losses).
    #[error("harness: {0}")]
    Harness(String),

    /// Checkpoint serialization problems.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable one-word category used in CLI failure lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::Autodiff(_) => {
                "numeric"
            }
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Train(_) => "train",
            Error::Harness(_) => "harness",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
