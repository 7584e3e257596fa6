use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("trajectory format error: {0}")]
    TrajectoryFormat(String),

    #[error("infeasible trajectory: {0}")]
    Infeasible(String),

    #[error("free-fall singularity at t = {t} s: thrust direction undefined")]
    FreeFall { t: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("qp solver: {0}")]
    Solver(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("controller error: {0}")]
    Controller(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
