use crate::numcore::TensorError;
use crate::denoiser::PredTarget;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampler expects {expected:?} predictions, model produces {found:?}")]
    PredTargetMismatch {
        expected: PredTarget,
        found: PredTarget,
    },
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocab hash mismatch: checkpoint has {expected}, supplied vocab is {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable one-word category for machine-parseable CLI failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::PredTargetMismatch { .. } => "pred-target-mismatch",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::VocabMismatch { .. } => "vocab-mismatch",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
