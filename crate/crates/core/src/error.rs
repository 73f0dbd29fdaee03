use bicap_tensor::TensorError;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("record {id}: {detail}")]
    Ingest { id: String, detail: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("schedule: iteration {iter} beyond total {total}")]
    Schedule { iter: usize, total: usize },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Parameter { op, detail: detail.into() }
}

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
