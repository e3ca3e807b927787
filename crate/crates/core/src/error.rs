use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Bad magic, unsupported version or an unparseable header.
    #[error("format error: {0}")]
    Format(String),

    /// A file whose framing was valid up to the point it ran out or disagreed
    /// with its own header.
    #[error("corrupt data in clip {clip}: {reason}")]
    Corruption { clip: usize, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("no object in clip {video_id}@{anchor_frame}")]
    EmptyObjects { video_id: String, anchor_frame: u64 },

    #[error("empty bank: {0}")]
    EmptyBank(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config drift: bank fingerprint {found} does not match active config {expected}")]
    ConfigDrift { expected: String, found: String },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::ConfigDrift { .. } => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}
