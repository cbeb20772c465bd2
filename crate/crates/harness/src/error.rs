use gigaslide_core::TensorError;
use gigaslide_dsnet::DsnetError;
use gigaslide_scae::ScaeError;
use gigaslide_slide::SlideError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Scae(#[from] ScaeError),
    #[error(transparent)]
    Dsnet(#[from] DsnetError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}
