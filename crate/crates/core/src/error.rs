use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: usize, world_size: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value in {what} at coordinate {index}: {value}")]
    NonFinite {
        what: String,
        index: usize,
        value: f64,
    },

    #[error("value {value} at coordinate {index} exceeds the fixed-point reduction range")]
    ReductionOverflow { index: usize, value: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("missing queue-wait entry for {0} node(s)")]
    MissingQueueWait(usize),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("equivalence violated: {0}")]
    Divergence(String),
}
