use thiserror::Error;

/// Errors raised by the distribution primitives, the filters and the
/// Monte Carlo harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular or not positive definite ({0})")]
    SingularMatrix(&'static str),

    #[error("argument outside the density's support: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mean undefined: degree {degree} must exceed {bound}")]
    MeanUndefined { degree: f64, bound: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("mode {0} is unreachable (zero predicted probability)")]
    DegenerateMode(usize),

    #[error("all mode likelihoods underflowed to zero")]
    LikelihoodUnderflow,

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
