use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
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
}

/// Failures while parsing IDX image/label files. Each variant names the field
/// that was found to be bad.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{file}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{file}: truncated while reading {field}")]
    Truncated {
        file: &'static str,
        field: &'static str,
    },

    #[error("{file}: {extra} trailing bytes after payload")]
    TrailingBytes { file: &'static str, extra: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}
