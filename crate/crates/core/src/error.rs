use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: payload has {actual} bytes, header declares {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("denominator {value:e} below guard {guard:e}")]
    GuardedDenominator { value: f64, guard: f64 },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("ground truth unavailable: {0}")]
    Mode(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
