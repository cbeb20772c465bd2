use gigaslide_core::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("slide {slide}: tile ({row}, {col}) unreadable: {reason}")]
    UnreadableTile {
        slide: String,
        row: u32,
        col: u32,
        reason: String,
    },
    #[error("slide {0}: empty slide, no patch survived sifting")]
    EmptySlide(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SlideError>;
