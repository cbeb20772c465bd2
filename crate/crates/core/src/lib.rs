//! Tensors, reverse-mode autodiff, convolution and normalization layers,
//! mask-aware sparse operators, optimizers and a checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::activation::LEAKY_SLOPE;
pub use ops::upsample::UpsampleMode;
pub use params::{ParamId, ParamKind, ParamStore};
pub use sparse::{MaskedTensor, SparseVar};
pub use tensor::{DType, Real, Tensor};
