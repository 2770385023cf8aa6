use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input rejected by a validation rule (bad config value, empty name, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Key not present in a registry or table.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Numerically degenerate input (zero vector, zero-area box, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("duplicate key: {0}")]
    Duplicate(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite value produced during training.
    #[error("numerical failure: {0}")]
    Numerical(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from user input rather than a runtime fault.
    /// The CLI maps this to exit code 1 (otherwise 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Contract(_)
                | Error::Lookup(_)
                | Error::Duplicate(_)
                | Error::Malformed { .. }
                | Error::Json(_)
                | Error::Dimension(_)
        )
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
