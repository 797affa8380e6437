use thiserror::Error;

/// Errors surfaced by the dispatch engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{file}:{line}: {msg}")]
    Schema {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("zero voltage magnitude at bus {0}")]
    ZeroVoltage(usize),

    #[error("tap position {tap} outside [{min}, {max}]")]
    TapOutOfRange { tap: f64, min: i32, max: i32 },

    #[error("power flow did not converge after {iterations} iterations (last max |dV| = {last_delta:e})")]
    PowerFlowDivergence { iterations: usize, last_delta: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver stopped without an optimal point: {0}")]
    Solver(String),

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether this error stems from bad user input rather than from a
    /// (correctly posed) problem turning out infeasible.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Topology(_)
                | Error::Input(_)
                | Error::Schema { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
