use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("rejected input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss {value} in batch [{batch}]")]
    NonFiniteLoss { value: f64, batch: String },

    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
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
