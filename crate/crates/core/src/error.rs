use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("divergence at step {step}: |X| = {norm:e} exceeds guard {guard:e}")]
    Divergence { step: usize, norm: f64, guard: f64 },

    #[error("basis error: {0}")]
    Basis(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("vanishing-discount schedule did not converge: {reason}")]
    ConvergenceFailure {
        reason: String,
        record: Vec<crate::vanishing::ScheduleEntry>,
    },

    #[error("grid oracle failure: {reason} (last residuals: {residuals:?})")]
    OracleFailure { reason: String, residuals: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
