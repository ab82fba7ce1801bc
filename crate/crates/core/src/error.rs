use sde_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("instance {0} has no pixels in the id map")]
    MissingMask(usize),
    #[error("scene placement exhausted {0} rejection tries")]
    RejectionBudget(usize),
    #[error("non-finite {stage} loss at step {step}")]
    NonFiniteLoss { stage: String, step: usize },
    #[error("bad {format} data: {msg}")]
    Format { format: &'static str, msg: String },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(what: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid { what, msg: msg.into() })
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}
