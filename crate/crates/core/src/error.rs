use thiserror::Error;

use crate::sim::{Action, Lane};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("action {action} is infeasible in lane {lane} at {speed} m/s")]
    InfeasibleAction {
        action: Action,
        lane: Lane,
        speed: f64,
    },

    #[error("episode already ended in a collision")]
    EpisodeOver,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("DP solver invariant violated: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
