use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("state error: {0}")]
    State(String),

    #[error("infeasible memory budget {budget} bytes; minimum achievable peak is {min_peak} bytes")]
    Infeasible { budget: u64, min_peak: u64 },

    #[error(transparent)]
    Fabric(#[from] crate::fabric::FabricError),

    #[error("checkpoint format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint was saved with world size {saved}, requested {requested}; reshard through sliced checkpoints first")]
    ReshardRequired { saved: usize, requested: usize },

    #[error("missing shard for rank {rank} in {dir}")]
    MissingShard { rank: usize, dir: PathBuf },

    #[error("incomplete slice set in {dir}: {msg}")]
    IncompleteSlices { dir: PathBuf, msg: String },

    #[error("io error (rank {rank:?}) at {path}: {source}")]
    Io {
        rank: Option<usize>,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, rank: Option<usize>, source: std::io::Error) -> Self {
        Error::Io {
            rank,
            path: path.into(),
            source,
        }
    }
}
