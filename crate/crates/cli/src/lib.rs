//! Configuration, experiment orchestration, verification suites and report
//! aggregation for the `hitgeo` command-line tool.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use experiment::{run_experiment, run_seed, ExperimentReport, RunSummary};
