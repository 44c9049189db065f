use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {id}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unknown sample id {0}")]
    UnknownSample(String),

    #[error("size budget violated: |train| + |validation| = {train} + {validation} is not below n_max = {n_max}")]
    Budget {
        train: usize,
        validation: usize,
        n_max: usize,
    },

    #[error("version conflict on {id}: expected {expected}, found {found}")]
    Conflict { id: String, expected: u64, found: u64 },

    #[error("invalid verdict for {id}: {message}")]
    InvalidVerdict { id: String, message: String },

    #[error("sample {id} was not flagged in round {round}")]
    NotFlagged { id: String, round: u32 },

    #[error("k + l = {requested} exceeds the {available} ranked samples; choose smaller K/L")]
    SelectionTooLarge { requested: usize, available: usize },

    #[error("missing verdict for flagged sample {0}")]
    MissingVerdict(String),

    #[error("class {0} has no samples in the active pool")]
    EmptyClass(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
