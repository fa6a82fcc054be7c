use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by estimation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("insufficient data: need at least 2 observations, got {0}")]
    InsufficientData(usize),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("variable {index} has zero sample variance")]
    DegenerateVariance { index: usize },

    #[error("implied covariance is numerically singular (condition estimate {condition:e})")]
    SingularModel { condition: f64 },

    #[error("Cholesky factorization failed (minimum unique variance {min_psi:e})")]
    Numerical { min_psi: f64 },

    #[error("penalty calibration failed for rho={rho}, gamma={gamma}: no sign change on bracket")]
    Calibration { rho: f64, gamma: f64 },

    #[error("penalized objective decreased by {decrease:e} at EM iteration {iteration}")]
    AscentViolation { iteration: usize, decrease: f64 },

    #[error("path cell (gamma #{gamma_index}, rho #{rho_index}) failed: {source}")]
    PathCell {
        gamma_index: usize,
        rho_index: usize,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
