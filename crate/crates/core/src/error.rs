use thiserror::Error;

/// Errors raised across the pick-and-place stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// NaN or infinite values surfaced where finite numbers are required.
    #[error("numeric fault: {0}")]
    Numeric(String),
    /// A persisted file is malformed (bad magic, version or truncated payload).
    #[error("format error: {0}")]
    Format(String),
    /// Scene sampling or oracle planning could not produce a valid result.
    #[error("scene error: {0}")]
    Scene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
