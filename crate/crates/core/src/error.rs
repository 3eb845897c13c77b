use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an op's preconditions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Architecture or training configuration violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. k out of range, non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("softmax row {row} has no finite entries")]
    DegenerateRow { row: usize },

    #[error("non-finite loss at step {step}; first non-finite output in layer `{layer}`")]
    NonFinite { step: usize, layer: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("corrupt tensor file: {0}")]
    Corruption(String),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    /// Checkpoint names or shapes do not match the model.
    #[error("checkpoint incompatible with model: {0}")]
    Compatibility(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config file: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the environment or on-disk data rather than
    /// by the caller's arguments.
    pub fn is_io_or_corruption(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Corruption(_) | Error::UnsupportedVersion(_))
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use dim_err;
