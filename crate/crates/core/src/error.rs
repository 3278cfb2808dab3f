use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the toolkit. The CLI maps these onto process exit
/// codes: data/IO problems → 2, numeric failures → 3.
#[derive(Debug, Error)]
pub enum VtsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VtsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VtsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            VtsError::InvalidInput(_) => 1,
            VtsError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VtsError>;
