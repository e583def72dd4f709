use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invariant violated{}: {message}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    Invariant {
        frame: Option<usize>,
        message: String,
    },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("object {object_id}: {source}")]
    Object {
        object_id: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invariant(frame: Option<usize>, message: impl Into<String>) -> Self {
        Error::Invariant {
            frame,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// The error beneath any stage or object context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Object { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
