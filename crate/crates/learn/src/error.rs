use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error(transparent)]
    Core(#[from] workbench_core::Error),
    #[error("tensor backend: {0}")]
    Candle(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("classifier parameters changed at iteration {iteration}")]
    ClassifierDrift { iteration: u64 },
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T, E = LearnError> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> LearnError {
    LearnError::Io {
        path: path.into(),
        source,
    }
}
