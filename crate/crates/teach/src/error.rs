use thiserror::Error;

use crate::session::Phase;

#[derive(Debug, Error)]
pub enum TeachError {
    #[error("no session '{0}'")]
    NotFound(String),
    #[error("session is in phase {actual}, expected {expected}")]
    PhaseMismatch { expected: String, actual: Phase },
    #[error("pose ({x:.4}, {y:.4}) lies outside the workspace")]
    OutOfBounds { x: f64, y: f64 },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] pnp_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TeachError {
    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            TeachError::NotFound(_) => "not_found",
            TeachError::PhaseMismatch { .. } => "phase_mismatch",
            TeachError::OutOfBounds { .. } => "out_of_bounds",
            TeachError::BadRequest(_) => "bad_request",
            TeachError::Core(pnp_core::Error::InvalidArgument(_)) => "bad_request",
            TeachError::Core(_) | TeachError::Io(_) => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, TeachError>;
