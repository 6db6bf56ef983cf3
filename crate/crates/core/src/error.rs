use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is not positive-definite")]
    CovarianceDegenerate,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported dimension count {0} (only 2 and 3 are supported)")]
    UnsupportedDims(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("degenerate domain: mean covariance trace is {0}")]
    DegenerateDomain(f64),
    #[error("zero-volume bounding box")]
    ZeroVolume,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("blank image: no pixel carries mass")]
    BlankImage,
    #[error("dataset mean integral is zero")]
    ZeroMeanIntegral,
    #[error("tape replay mismatch: {0}")]
    TapeMismatch(String),
    #[error("forward pass is not deterministic at the checked point")]
    NonDeterministic,
    #[error("non-finite loss at step {step}; batch dumped to {dump:?}")]
    NonFiniteLoss { step: u64, dump: Option<PathBuf> },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
