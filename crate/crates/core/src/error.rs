use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary or text input; `offset` is the byte offset at which
    /// decoding failed.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Structured input (JSON, JSONL, CSV) that parsed but does not fit the
    /// expected schema.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for input/format problems, 3 for
    /// numeric or contract failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Input(_) | Error::Io { .. } => 2,
            Error::Contract(_) | Error::Numeric(_) | Error::Generation(_) => 3,
        }
    }
}
