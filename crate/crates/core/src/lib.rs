//! Deterministic simulator for comparing communication strategies in
//! multi-worker fine-tuning.
//!
//! The crate covers the full pipeline of a toy distributed fine-tuning study:
//!
//! - [`nn`]: a residual tanh MLP with stochastic depth, exact reverse-mode
//!   gradients, and a central-difference oracle.
//! - [`data`]: synthetic Gaussian-cluster tasks with a pretraining label
//!   superset, shifted test splits, and coordinated-seed sharding.
//! - [`engine`]: the training loop with per-step gradient synchronization
//!   (`FullSync`), grouped synchronization, fully independent groups, and
//!   periodic parameter averaging.
//! - [`weights`]: averaging, debiased EMA, WiSE-FT interpolation, output
//!   ensembles, LP-FT head initialization, and interpolation barrier scans.
//! - [`diversity`]: paired-worker mixup batches and the KL regularizer.
//! - [`costmodel`]: discrete-event model of backward compute and bucketed
//!   gradient communication, stragglers, and scheduling wait.
//! - [`stats`]: accuracy, the exact McNemar test, and metric CSV files.
//!
//! All reductions that cross workers go through [`exact`], so runs are
//! bit-reproducible regardless of worker count or thread scheduling.

pub mod costmodel;
pub mod data;
pub mod diversity;
pub mod engine;
pub mod error;
pub mod exact;
pub mod nn;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
