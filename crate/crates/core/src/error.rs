use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid transition matrix: {0}")]
    InvalidChain(String),

    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),

    #[error("invalid random mapping representation: {0}")]
    InvalidMapping(String),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} = {size} exceeds the guard {limit}; {hint}")]
    GuardExceeded {
        what: &'static str,
        size: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("d(m) did not reach {eps} within {cap} steps (best m = {best_m}, d = {best_d})")]
    MixingCapExceeded {
        eps: f64,
        cap: usize,
        best_m: usize,
        best_d: f64,
    },

    #[error("threshold not resolved: tail never at or below 1/4 within the computed range (last m = {last_m})")]
    ThresholdNotResolved { last_m: usize },

    #[error("map is not verified completely positive")]
    NotCpVerified,

    #[error("matrix is not symmetric (max deviation {0:e})")]
    Asymmetric(f64),

    #[error("operator is not a contraction (spectral norm {0})")]
    NotContraction(f64),

    #[error("amplified mode has no exact iteration count for kappa = {0}; use postselect")]
    NoExactRotation(usize),
}

impl Error {
    pub fn is_guard(&self) -> bool {
        matches!(self, Error::GuardExceeded { .. })
    }
}
