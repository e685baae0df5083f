use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum GksError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("not on tape: {0}")]
    NotOnTape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: unsupported bit depth {depth}")]
    UnsupportedBitDepth { path: PathBuf, depth: String },

    #[error("{path}: grayscale required")]
    NotGrayscale { path: PathBuf },

    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GksError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GksError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GksError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::GksError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
