use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the prediction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("undefined circular mean: resultant length {0:e} is below 1e-12")]
    UndefinedMean(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("model has not been trained")]
    Untrained,

    #[error("missing fusion input: {0}")]
    MissingFusion(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics (non-finite activations, losses).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::UndefinedMean(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
