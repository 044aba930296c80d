//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("history window too short: need at least 2 entries, got {got}")]
    InsufficientHistory { got: usize },

    #[error("client shard is empty")]
    EmptyShard,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("client roster is empty")]
    EmptyRoster,

    #[error("{path}: bad IDX {field}: {message}")]
    IdxFormat {
        path: String,
        field: &'static str,
        message: String,
    },

    #[error("cannot partition {n_samples} samples across {n_clients} clients")]
    InfeasiblePartition { n_samples: usize, n_clients: usize },

    #[error("krum needs at least f + 3 = {needed} updates, got {got}")]
    KrumInfeasible { needed: usize, got: usize },

    #[error("multi-krum selection count m = {m} outside 1..=n-f = {max}")]
    MultiKrumSelection { m: usize, max: usize },

    #[error("defense exhausted: every client excluded this round")]
    DefenseExhausted,

    #[error("config key `{key}`: {message}")]
    Config { key: &'static str, message: String },

    #[error("model diverged: non-finite parameters after round {round}")]
    NonFinite { round: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            key,
            message: message.into(),
        }
    }
}
