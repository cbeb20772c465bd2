use gigaslide_core::TensorError;
use gigaslide_slide::SlideError;

#[derive(Debug, thiserror::Error)]
pub enum ScaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("patch must be {expected}x{expected} RGB, got {width}x{height}")]
    PatchExtent { expected: u32, width: u32, height: u32 },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ScaeError>;
