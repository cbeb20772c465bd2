//! Dual-stream network over a slide's thumbnail matrix (dense, multi-scale
//! blocks) and embedding matrix (mask-aware bottleneck blocks), fused by
//! stream and channel attention.

pub mod blocks;
pub mod cam;
pub mod config;
pub mod error;
pub mod model;

pub use blocks::split_channels;
pub use cam::{cam_map, grad_cam};
pub use config::{Components, DsnetConfig};
pub use error::{DsnetError, Result};
pub use model::{count_params, BlockSpec, Dsnet, DsnetInput, DsnetOutput};
