use thiserror::Error;

/// Errors raised by the simulation and diagnostics layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index out of range: stability index alpha = {0} must lie in (0, 2)")]
    StableIndexOutOfRange(f64),

    #[error("index out of range: finite-dimensional mode requires 1 < alpha < 2, got {0}")]
    FiniteDimIndex(f64),

    #[error("degenerate spectral measure: directions span a subspace of rank {rank} < {dim}")]
    DegenerateSpectralMeasure { rank: usize, dim: usize },

    #[error("invalid spectral measure: {0}")]
    InvalidSpectralMeasure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("inadmissible configuration: {0}")]
    Inadmissible(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {time} is not an integer multiple of dt = {dt}")]
    NotMultipleOfDt { time: f64, dt: f64 },

    #[error("non-finite state at step {step} (t = {time})")]
    NonFiniteState { step: usize, time: f64 },

    #[error("probability vector is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("radius must be positive")]
    NonPositiveRadius,

    #[error("moment may be infinite: p = {p} must satisfy 0 <= p < alpha = {alpha}")]
    MomentMayBeInfinite { p: f64, alpha: f64 },

    #[error("insufficient tail data: {finite} finite samples (need at least {required})")]
    InsufficientTailData { finite: usize, required: usize },

    #[error("insufficient probe spread: max/min of |x|^p is {ratio:.3} (need at least 10)")]
    InsufficientProbeSpread { ratio: f64 },

    #[error("drift recursion inadmissible: q^2 + 2 C2 / M^p = {lhs} > q = {q}; minimal admissible M = {min_m}")]
    DriftRecursionInadmissible { lhs: f64, q: f64, min_m: f64 },

    #[error("already mixed; increase initial separation (max TV {max_tv} below noise floor {floor})")]
    AlreadyMixed { max_tv: f64, floor: f64 },

    #[error("fit failed: {0}")]
    FitFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
