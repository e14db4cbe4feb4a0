use thiserror::Error;

use crate::coeff::CoeffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error("precondition on {what} violated: {message}")]
    Precondition { what: String, message: String },
    #[error("{solver} did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged {
        solver: String,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("insufficient data to estimate {0}")]
    InsufficientData(String),
    #[error("scale tuple {row} is not ordered: eps[{index}] < eps[{}]", index + 1)]
    Ordering { row: usize, index: usize },
    #[error("rho extrapolation diverged; raw sequence {sequence:?}")]
    Extrapolation { sequence: Vec<f64> },
    #[error("projection is degenerate: |M^T z| = {value:.3e} at z = {witness:?}")]
    Degenerate { witness: Vec<i64>, value: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn precondition(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Precondition {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for bad input, 3 for numerical or I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Coeff(_)
            | Error::Precondition { .. }
            | Error::Config { .. }
            | Error::Ordering { .. }
            | Error::Degenerate { .. } => 2,
            _ => 3,
        }
    }
}
