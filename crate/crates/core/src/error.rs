use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("flow left the bounding region at t = {time}")]
    Escape { time: f64 },

    #[error("no convergence: {0}")]
    Convergence(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("missing precomputation: {0}")]
    State(String),

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("path blew up at t = {time} after {steps} steps")]
    BlowUp { time: f64, steps: u64 },

    #[error("step budget of {budget} exhausted at t = {time}")]
    Budget { budget: u64, time: f64 },

    #[error("i/o: {0}")]
    Io(String),

    #[error("specification rejected: {}", .0.join("; "))]
    Validation(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
