use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty pool for digit {digit} in task {task}")]
    EmptyPool { task: String, digit: u8 },

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("numeric error at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
