use thiserror::Error;

/// Errors raised by model construction, solvers and simulation setup.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoopError {
    #[error("dimension mismatch: expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("at least two nodes are required, got {0}")]
    TooFewNodes(usize),

    #[error("{got} nodes exceeds the supported maximum of {max}")]
    TooManyNodes { got: usize, max: usize },

    #[error("this operation is defined for exactly two nodes, got {0}")]
    NotTwoNodes(usize),

    #[error("arrival rate of node {node} must be positive and finite, got {value}")]
    InvalidLoad { node: usize, value: f64 },

    #[error("cooperation probability of node {node} must lie in [0, 1], got {value}")]
    InvalidProbability { node: usize, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("loads must be sorted in non-increasing order")]
    UnsortedLoads,

    #[error("singular linear system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("steady state check failed: {what} = {value:e}")]
    SteadyStateViolation { what: &'static str, value: f64 },

    #[error("Erlang-B is implemented for 1 or 2 servers, got {0}")]
    UnsupportedServers(u32),

    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, CoopError>;
