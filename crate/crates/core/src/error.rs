use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. Display strings start with the error class
/// ("format error", "shape error", ...) so callers and logs can match on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("inconsistent sequence: {0}")]
    InconsistentSequence(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("step error: {0}")]
    Step(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error("insufficient stages: {0}")]
    InsufficientStages(String),

    #[error("degenerate ROI: {0}")]
    DegenerateRoi(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category, used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Configuration(_)
            | Error::Parameter(_)
            | Error::Step(_)
            | Error::FreezeViolation(_)
            | Error::InsufficientStages(_)
            | Error::Json(_) => ErrorKind::Config,
            Error::Divergence(_) => ErrorKind::Divergence,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
}
