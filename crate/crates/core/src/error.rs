use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integrator step size underflow at t = {t} (step {step:e})")]
    StepUnderflow { t: f64, step: f64 },

    #[error("integrator exceeded {0} steps")]
    TooManySteps(usize),

    #[error("energy shell is empty: {0}")]
    EmptyShell(String),

    #[error("grid does not resolve the semiclassical scale: {0}")]
    Resolution(String),

    #[error("newton iteration did not converge: {0}")]
    NewtonDivergence(String),

    #[error("time truncation failed: {0}")]
    Truncation(String),

    #[error("singular matrix at pivot {0}")]
    Singular(usize),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("fit rejected: {0}")]
    FitRejected(String),

    #[error("not supported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
