use std::path::PathBuf;

use dape_core::DapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] DapeError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        HarnessError::Format { path: path.into(), detail: detail.to_string() }
    }

    /// 1 for failed checks and numeric trouble, 2 for bad usage or config, 3 for files.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Io { .. } | HarnessError::Format { .. } => 3,
            HarnessError::Check(_) => 1,
            HarnessError::Core(e) => match e {
                DapeError::Config(_) => 2,
                DapeError::Io { .. } | DapeError::Format(_) => 3,
                _ => 1,
            },
        }
    }
}
