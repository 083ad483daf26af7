use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("level mismatch: expected level {expected}, got {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("process kind mismatch: {0}")]
    KindMismatch(String),

    #[error("binary control set U = C ∩ {{0,1}}^k is empty")]
    EmptyBinarySet,

    #[error("instance validation failed ({} violation(s))", .0.len())]
    Validation(Vec<Violation>),

    #[error("control is not admissible: {0}")]
    InadmissibleControl(String),

    #[error("size cap exceeded: {what} needs {required}, cap is {cap}")]
    TooLarge {
        what: &'static str,
        required: u128,
        cap: u128,
    },

    #[error("enumeration budget exceeded: {required} controls required, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("power iteration converged to λ = {lambda} but λ + c ≤ 0.01·c for shift c = {shift}")]
    ShiftBoundViolated { lambda: f64, shift: f64 },

    #[error("relaxed sampling refused: acceptance rate {rate:e} below 1e-3 (degenerate C)")]
    DegenerateDomain { rate: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid instance file at {pointer}: {message}")]
    Format { pointer: String, message: String },

    #[error("invalid control file, line {line}: {message}")]
    ControlFile { line: usize, message: String },
}
