use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid request: {0}")]
    Request(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("empty datastore: {0}")]
    EmptyDatastore(String),

    #[error("degenerate score: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class of the error, used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Request(_) | Error::VocabularyMismatch(_) => {
                ErrorKind::Config
            }
            Error::Degenerate(_) => ErrorKind::Degenerate,
            Error::Dimension { .. }
            | Error::Validation(_)
            | Error::Format { .. }
            | Error::Lookup(_)
            | Error::Transport { .. }
            | Error::EmptyDatastore(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Degenerate,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
