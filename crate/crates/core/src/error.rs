use thiserror::Error;

use crate::matern::MaternParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance matrix is not positive definite at {theta}")]
    NotPositiveDefinite { theta: MaternParams },

    #[error("duplicate locations {0} and {1}")]
    DuplicateLocation(usize, usize),

    #[error("matrix J is singular (condition estimate {condition:e})")]
    SingularJ { condition: f64 },

    #[error("objective is not finite at the initial point {0}")]
    InfeasibleInit(MaternParams),

    #[error("{file}: line {line}, column {column}: {msg}")]
    Parse {
        file: String,
        line: u64,
        column: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Whether the failure is numerical (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::SingularJ { .. } | Error::InfeasibleInit(_)
        )
    }
}
