use thiserror::Error;

/// Errors raised by the flow, sensitivity and perturbation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("vector field has no analytic Jacobian action")]
    MissingJvp,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside window [{start}, {end}]")]
    OutsideWindow { t: f64, start: f64, end: f64 },

    #[error("step size collapsed near t = {t} (h = {step:e}); blow-up suspected")]
    BlowupSuspected { t: f64, step: f64 },

    #[error("maximum number of steps ({max_steps}) exceeded at t = {t}")]
    MaxStepsExceeded { max_steps: usize, t: f64 },

    #[error("quadrature exceeded the panel limit ({limit})")]
    QuadratureLimit { limit: usize },

    #[error("iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
