use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A binary file does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("interval {interval}: {source}")]
    Interval {
        interval: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_interval(self, interval: usize) -> Self {
        match self {
            e @ Error::Interval { .. } => e,
            other => Error::Interval {
                interval,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with interval wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Interval { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: configuration 2, numeric 3, I/O 4, anything else 1.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } | Error::Domain(_) => 2,
            Error::Numeric(_) | Error::Training { .. } | Error::Evaluation(_) => 3,
            Error::Io { .. } | Error::Format(_) => 4,
            Error::Interval { .. } => 1,
        }
    }
}
