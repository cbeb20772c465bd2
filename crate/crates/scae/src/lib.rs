//! Sparse convolutional autoencoder: a nucleus-focused sparse foreground
//! embedding and a dense background embedding per patch.

pub mod encode;
pub mod error;
pub mod mask;
pub mod model;
pub mod search;
pub mod train;

pub use encode::{encode_patches, encode_scan, EmbeddingMatrix};
pub use error::{Result, ScaeError};
pub use mask::{crosswise_mask, update_sparsity_rate};
pub use model::{pool_to_vector, Scae, ScaeConfig, ScaeForward};
pub use search::{search_sparsity_rate, RhoSearch};
pub use train::{train_scae, ScaeHistory, ScaeTrainConfig};
