use std::path::PathBuf;

use crate::transport::ProviderError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Core(#[from] distal_core::Error),
    #[error("duplicate id {id} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error(transparent)]
    Verify(#[from] crate::verify::VerifyError),
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// Process exit code: 2 config, 3 provider, 4 state.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Provider(_) => 3,
            _ => 4,
        }
    }
}
