use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not PSD: smallest eigenvalue {min:e} is below -{tol:e}")]
    EigenvalueBelowTolerance { min: f64, tol: f64 },
    #[error("covariance square root is singular: smallest eigenvalue {min:e} <= {tol:e}")]
    SingularCovariance { min: f64, tol: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("log-log regression needs strictly positive inputs")]
    NonPositiveInput,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid start time {t_start}: Adam models are singular at t = 0")]
    InvalidStart { t_start: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("dataset file: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
