use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum MixRecError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("configuration error: {0}")]
    Config(String),

    /// A user interacts with every item; no negative can be sampled.
    #[error("negative sampling stalled for user {user}: all {num_items} items are positives")]
    NegativeUnreachable { user: u32, num_items: usize },

    #[error("dirichlet sampling underflowed to zero after {retries} retries (alpha={alpha})")]
    DirichletUnderflow { alpha: f64, retries: usize },

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("bad checkpoint header")]
    BadCheckpoint,
}

pub type Result<T> = std::result::Result<T, MixRecError>;
