use std::path::PathBuf;

/// Errors surfaced by every layer of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity error in clip `{clip}`: {detail}")]
    Integrity { clip: String, detail: String },

    #[error("dataset version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
