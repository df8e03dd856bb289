use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::GraphError;
use crate::upcycle::CheckpointError;

/// Crate-level error. Variants line up with the CLI exit-code classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Graph(GraphError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<GraphError> for Error {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NonFinite { .. } => Error::Numeric(e.to_string()),
            other => Error::Graph(other),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
