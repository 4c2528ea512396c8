use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument was outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An iterative or factorisation routine failed numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Integration produced a non-finite state.
    #[error("divergence at t = {time:.6} s: {what}")]
    Divergence { time: f64, what: String },

    /// A filter step failed for a specific mode.
    #[error("mode {mode}: {source}")]
    Mode {
        mode: usize,
        #[source]
        source: Box<Error>,
    },

    /// Invalid configuration (scenario files, schedules, mode sets).
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Tags the error with the mode it came from.
    pub fn in_mode(self, mode: usize) -> Self {
        match self {
            e @ Error::Mode { .. } => e,
            other => Error::Mode {
                mode,
                source: Box::new(other),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
