//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, dimensions, or arguments.
    #[error("config error: {0}")]
    Config(String),
    /// The one-shot cloud problem is infeasible at the start of the task.
    #[error("cloud problem infeasible at task start: {0}")]
    InfeasibleCloud(String),
    /// NaN/Inf encountered where finite values are required.
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code convention: 2 config, 3 infeasible cloud start,
    /// everything else is also reported as a config-class failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleCloud(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
