use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite loss at step {step}, batch {batch}: {value}")]
    NonFinite { step: usize, batch: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Dimension(_) => 3,
            Error::State(_) => 1,
        }
    }
}
