use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DapeError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DapeError> = std::result::Result<T, E>;

impl DapeError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DapeError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        DapeError::Dimension { op, detail: format!("{a:?} vs {b:?}") }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DapeError::Io { path: path.into(), source }
    }
}
