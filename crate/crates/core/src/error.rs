use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("environment is not strongly connected")]
    NotStronglyConnected,
    #[error("invalid one-way edge {0:?} -> {1:?}: cells must be adjacent and on the grid")]
    InvalidEdge((usize, usize), (usize, usize)),
    #[error("generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("trajectory {index} has {len} transitions, need more than h_max = {h_max}")]
    TrajectoryTooShort {
        index: usize,
        len: usize,
        h_max: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("goal {0} is not reachable from every state")]
    GoalUnreachable(usize),
    #[error("too many states: {0} (limit {1})")]
    TooManyStates(usize, usize),
    #[error("need at least {need} states, got {got}")]
    TooFewStates { need: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("backward called without a recorded forward pass")]
    NoTape,
    #[error("task encoder must be frozen before embedding training")]
    FrozenViolation,
    #[error("state encoder must be frozen before policy training")]
    NotFrozen,
    #[error("phase {requested} cannot run after {completed} completed phase(s)")]
    PhaseOrderViolation {
        requested: &'static str,
        completed: usize,
    },
    #[error("need at least 2 distinct candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
