use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training stopped on a non-finite loss. Carries the last finite weights.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_finite: Box<crate::nn::WeightVector>,
    },

    #[error("bound optimization hit a non-finite objective at iteration {iteration}")]
    ObjectiveDiverged {
        iteration: usize,
        last_finite: Box<crate::pacbayes::OptimizerState>,
    },

    #[error("idx format error in {file}: {field}: {reason}")]
    Idx {
        file: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("container format error: {0}")]
    Container(String),

    #[error("prior mean is not invariant under permutation {index}")]
    NotInvariant { index: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
