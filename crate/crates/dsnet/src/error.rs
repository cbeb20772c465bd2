use gigaslide_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DsnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("extent mismatch at {block}: {detail}")]
    Extent { block: String, detail: String },
}

pub type Result<T> = std::result::Result<T, DsnetError>;
