use thiserror::Error;

/// Errors raised by the geometry, flow, entropy and singularity layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid metric state: {0}")]
    InvalidState(String),

    #[error("profile is non-positive at interior node {index} (psi = {value:e})")]
    NonPositiveProfile { index: usize, value: f64 },

    #[error("pole regularity violated at node {index}: |psi'| = {slope}, expected 1")]
    PoleRegularityViolated { index: usize, slope: f64 },

    #[error("profile collapsed within a step at node {index} (psi = {value:e})")]
    ProfileCollapse { index: usize, value: f64 },

    #[error("regridding failed: {0}")]
    GaugeDriftExceeded(String),

    #[error("singular-time fit is ill-conditioned: {0}")]
    FitIllConditioned(String),

    #[error("constraint residual {residual:e} exceeds tolerance {tolerance:e}")]
    ConstraintViolated { residual: f64, tolerance: f64 },

    #[error("potential is identically zero")]
    ZeroField,

    #[error("backward potential step is unstable: {0}")]
    StepUnstable(String),

    #[error("blow-up window unavailable for index {index}: t_i + r_min/Q_i = {start} < 0")]
    WindowUnavailable { index: usize, start: f64 },

    #[error("bisection budget exhausted with bracket [{lo}, {hi}]")]
    BudgetExhausted { lo: f64, hi: f64 },

    #[error("time {t} outside the existence interval [0, {t_max})")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
