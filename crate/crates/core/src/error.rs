use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sample generation failed: {0}")]
    Generation(String),

    #[error("LI completion failed: {0}")]
    Completion(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("malformed FNT1 data at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("dataset error in sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
