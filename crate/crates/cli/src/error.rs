use std::io;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Core(#[from] hitgeo_core::Error),
    #[error("bad file {path}: {msg}")]
    Parse { path: String, msg: String },
}

impl CliError {
    /// Process exit code: 2 config, 3 verification, 4 i/o, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use hitgeo_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io(_) | CliError::Parse { .. } => 4,
            CliError::Core(E::Io(_) | E::Format(_)) => 4,
            CliError::Core(
                E::InvalidEnv(_)
                | E::InvalidEdge(..)
                | E::NotStronglyConnected
                | E::InvalidArgument(_)
                | E::TrajectoryTooShort { .. },
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(io::Error::other(e))
    }
}
