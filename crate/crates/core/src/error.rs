use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GgpmError {
    #[error("observation {value} outside support: {support}")]
    Domain { value: f64, support: String },
    #[error("parameter out of range: {0}")]
    Parameter(String),
    #[error("overflow while evaluating {0}")]
    Overflow(String),
    #[error("zero curvature at eta={eta}, y={y}")]
    SingularCurvature { eta: f64, y: f64 },
    #[error("expansion point undefined for y={y}: {reason}")]
    UndefinedPoint { y: f64, reason: String },
    #[error("non-positive Taylor curvature w={w} at observation {index}")]
    NegativeCurvature { index: usize, w: f64 },
    #[error("matrix is not positive definite (jitter escalated to {jitter:e})")]
    NotPsd { jitter: f64 },
    #[error("failed to converge: {0}")]
    Convergence(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no sampler for {0}")]
    UnsupportedSampler(String),
    #[error("every optimization start failed ({0} starts)")]
    AllStartsFailed(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("unknown identifier {0}")]
    UnknownId(String),
    #[error("invalid model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GgpmError>;
