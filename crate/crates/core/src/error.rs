use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter vectors or layouts disagree.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// A hyperparameter or flag is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A dataset or batch violates its shape or label invariants.
    #[error("invalid data: {0}")]
    Data(String),

    /// Training or posterior construction produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: file truncated (need {needed} bytes, have {actual})")]
    Truncated { path: PathBuf, needed: u64, actual: u64 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
