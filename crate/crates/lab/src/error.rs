use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] meta_attack_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    /// A bad row or field in a CSV file. `line` is 1-based and counts the
    /// header.
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint does not fit the config: {0}")]
    Mismatch(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path} holds rows of run {found}, this run is {expected}")]
    RunMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("task filter accepted {accepted} of {tried} episodes, {needed} needed")]
    FilterExhausted {
        accepted: usize,
        tried: usize,
        needed: usize,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
