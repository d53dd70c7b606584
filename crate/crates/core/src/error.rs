use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::IntegrationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Bad parameters or inputs supplied by the caller.
    Config,
    /// The numerics failed (integrator, eigensolver, fit degeneracy).
    Numerical,
    /// Input data violated a physical or schema constraint.
    Validation,
    /// Filesystem or serialization failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("time {t} outside schedule range [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("schedule never crosses g = J")]
    NoCriticalCrossing,

    #[error("degenerate ground state: {0}")]
    DegenerateGroundState(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("system too large for dense engine: L = {l} exceeds cap {cap}")]
    SizeCap { l: usize, cap: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Integration(#[from] IntegrationError),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Validation => "validation",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidChain(_)
            | Error::InvalidSchedule(_)
            | Error::TimeOutOfRange { .. }
            | Error::NoCriticalCrossing
            | Error::UnsupportedTopology(_)
            | Error::SizeCap { .. }
            | Error::InvalidArgument(_) => ErrorCategory::Config,
            Error::DegenerateGroundState(_) | Error::Integration(_) | Error::Fit(_) => {
                ErrorCategory::Numerical
            }
            Error::Validation(_) => ErrorCategory::Validation,
            Error::Io(_) | Error::Csv(_) => ErrorCategory::Io,
        }
    }
}
