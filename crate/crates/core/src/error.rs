use thiserror::Error;

use crate::topology::NullspaceFailure;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("objective has no closed-form minimizer")]
    NoClosedForm,

    #[error("degenerate sampling box: {0}")]
    DegenerateBox(String),

    #[error("communication graph is disconnected")]
    Disconnected,

    #[error("self-loop at agent {0}")]
    SelfLoop(usize),

    #[error("{controllers} controllers cannot connect {agents} agents: at least {} are required", agents.saturating_sub(1))]
    TooFewControllers { agents: usize, controllers: usize },

    #[error("nullspace property violated: {0}")]
    Nullspace(NullspaceFailure),

    #[error("random structure generation gave up after {0} attempts")]
    RetryBudgetExhausted(usize),

    #[error("algebraic loop matrix is singular")]
    SingularLoop,

    #[error("oracle did not converge after {iterations} iterations (residual {residual:e})")]
    OracleNonConvergence { iterations: usize, residual: f64 },

    #[error("simulation diverged at t = {t}")]
    Diverged { t: f64 },

    #[error("invalid event at t = {time}: {reason}")]
    InvalidEvent { time: f64, reason: String },

    #[error("singular gain matrix: {0}")]
    SingularGain(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("unsupported block: {0}")]
    UnsupportedBlock(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
