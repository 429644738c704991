use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum SlaccError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max deviation {max_deviation:e})")]
    NotSymmetric { max_deviation: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("identifiability condition A.1 violated: L = {l} must satisfy L < V = {v}")]
    RankBound { l: usize, v: usize },

    #[error("weighted Gram matrix is singular (rank-deficient covariates)")]
    SingularGram,

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("site {0} was not seen during fitting")]
    UnseenSite(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, SlaccError>;
