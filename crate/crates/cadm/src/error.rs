//! Error taxonomy and the process exit-code contract.
//!
//! Exit codes: 0 = success, 1 = runtime fault, 2 = usage/config error.
//! Every variant maps to exactly one of the two failure codes via
//! [`Error::exit_code`]; the CLI layer is the only place that calls it.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: unknown keys, malformed values, missing files named on
    /// the command line, mismatched checkpoint/env combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement between caller and callee.
    #[error("shape error in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Malformed training data, e.g. a segment that would cross an episode
    /// boundary.
    #[error("data error: {0}")]
    Data(String),

    /// Environment produced a non-finite state.
    #[error("environment fault: {0}")]
    EnvFault(String),

    /// Non-finite gradients reached the optimizer.
    #[error("optimizer error: {0}")]
    Optimizer(String),

    /// Training preconditions unmet (e.g. dataset smaller than one batch).
    #[error("training error: {0}")]
    Train(String),

    /// Degenerate input to an analysis routine (e.g. rank-0 PCA input).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Map this error onto the process exit-code contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::EnvFault(_)
            | Error::Optimizer(_)
            | Error::Train(_)
            | Error::Degenerate(_)
            | Error::Io(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
