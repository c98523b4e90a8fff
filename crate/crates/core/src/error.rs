use thiserror::Error;

use crate::dsl::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (shapes, config values, path constraints).
    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    /// A drift or test functional produced a non-finite value or divided by zero.
    #[error("evaluation error in `{expr}`: {reason}")]
    Eval { expr: String, reason: String },

    /// The operation is not defined for this system structure or dimension.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("simulation aborted at step {step}, particle {particle}: {source}")]
    Simulation {
        step: usize,
        particle: usize,
        #[source]
        source: Box<Error>,
    },

    /// Objective became NaN during optimization; carries the offending iterate.
    #[error("objective is not finite at iteration {iteration}")]
    Optimization { iteration: usize, iterate: Vec<f64> },
}

impl Error {
    /// Stable machine-readable category, used for structured error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Parse(_) => "parse",
            Error::Eval { .. } => "evaluation",
            Error::Unsupported(_) => "unsupported",
            Error::Simulation { .. } => "simulation",
            Error::Optimization { .. } => "optimization",
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
