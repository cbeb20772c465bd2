//! Slide storage, procedural slides, patch sifting and thumbnail matrices.

pub mod error;
pub mod grid;
pub mod manifest;
pub mod source;
pub mod synth;
pub mod thumbnail;

pub use error::{Result, SlideError};
pub use grid::{scan_slide, sift_patches, CellState, PatchGrid, ScanConfig, SlideScan};
pub use manifest::{Lesion, SlideManifest};
pub use source::{write_slide, SlideSource, StoredSlide};
pub use synth::{Decoy, SynthConfig, SynthSlide};
pub use thumbnail::{build_thumbnail_matrix, compression_report, CompressionReport, ThumbnailMatrix};
