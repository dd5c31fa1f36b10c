use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents.
    #[error("{0}")]
    Format(String),

    /// A value or argument that violates an operation's contract.
    #[error("{0}")]
    Invalid(String),

    /// Degenerate numerical input (constant curve, rank-deficient basis, ...).
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Non-finite values during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numbers rather than by data or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::Numeric(_)
                | Error::Diff(diffcore::DiffError::NonFiniteGradient(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
