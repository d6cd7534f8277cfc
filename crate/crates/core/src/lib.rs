//! Directed hitting-time geometry for finite controlled Markov processes.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: tabular controlled Markov processes, behavior policies, offline
//!   trajectory datasets and relabeled training tuples.
//! - [`oracle`]: exact linear-algebra ground truth (Poisson hitting times,
//!   transient spectral radii, adjoint representers, perturbation bounds).
//! - [`diffkit`]: dense feed-forward networks with hand-written reverse mode,
//!   Adam, and finite-difference gradient checking.
//! - [`train`]: the three training phases (task identifiers, directed
//!   embedding, latent-conditioned policy).
//! - [`planner`]: DPP coresets, asymmetric cost graphs, shortest-path
//!   planning and the recursive-midpoint baseline.
//!
//! Data-parallel loops go through [`par::Exec`]; with the `parallel` feature
//! disabled every `Exec` runs sequentially and produces identical results.

pub mod diffkit;
pub mod env;
pub mod error;
pub mod oracle;
pub mod par;
pub mod planner;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
