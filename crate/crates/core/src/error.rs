use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("ingest failed with {} offending record(s): {}", .0.len(), .0.join("; "))]
    Ingest(Vec<String>),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("cannot balance split {split}: {reason}")]
    CannotBalance { split: String, reason: String },

    #[error("cannot load {what} from {locator}: {detail}")]
    Load {
        what: &'static str,
        locator: String,
        detail: String,
    },

    #[error("backend {backend} failed: {detail}")]
    Backend { backend: String, detail: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("image decode failed for {source_id}: {detail}")]
    Decode { source_id: String, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

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
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
