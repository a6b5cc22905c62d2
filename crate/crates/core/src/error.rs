use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("text provider error: {0}")]
    Provider(String),

    #[error("class name must not be empty")]
    EmptyName,

    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,

    #[error("degenerate quadratic: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at record {record}: {message}")]
    Format { record: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint config hash {found} does not match run config hash {expected}")]
    ResumeMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
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

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
