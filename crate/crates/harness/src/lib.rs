//! Experiment orchestration for the lofi simulator: single runs, sweeps,
//! cost reports, equivalence checks and barrier scans.

pub mod config;
pub mod cost;
pub mod experiment;
pub mod sweep;
pub mod verify;

pub use config::ExperimentConfig;
pub use experiment::{run, RunOptions};
