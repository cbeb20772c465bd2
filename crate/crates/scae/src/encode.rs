//! Embedding matrix assembly from a scanned slide.

use std::path::Path;

use gigaslide_core::checkpoint::{load_tensors, save_tensors};
use gigaslide_core::{Graph, ParamStore, Tensor};
use gigaslide_slide::SlideScan;
use image::RgbImage;

use crate::error::{Result, ScaeError};
use crate::model::{pool_to_vector, Scae};
use crate::train::patches_to_tensors;

const ENCODE_BATCH: usize = 32;

/// Per-patch vectors on the cropped patch grid: `data [C, H, W]`, observation
/// mask `[1, H, W]`; unobserved cells are exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub slide_id: String,
    pub patch_size: u32,
    pub data: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl EmbeddingMatrix {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Zero-pads bottom/right to `h × w` (mask 0 in the padding).
    pub fn padded(&self, h: usize, w: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (c, eh, ew) = (self.channels(), self.height(), self.width());
        if h < eh || w < ew {
            return Err(ScaeError::Invalid(format!("cannot pad {eh}x{ew} embedding to {h}x{w}")));
        }
        let pad = |t: &Tensor<f32>, ch: usize| {
            let src = t.data();
            Tensor::from_fn(&[ch, h, w], |i| {
                let (k, y, x) = (i / (h * w), i / w % h, i % w);
                if y < eh && x < ew {
                    src[(k * eh + y) * ew + x]
                } else {
                    0.0
                }
            })
        };
        Ok((pad(&self.data, c), pad(&self.mask, 1)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ps = Tensor::scalar(self.patch_size as f32);
        save_tensors(path, &[("embedding", &self.data), ("mask", &self.mask), ("patch_size", &ps)])?;
        Ok(())
    }

    pub fn load(path: &Path, slide_id: &str) -> Result<Self> {
        let entries = load_tensors(path)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_real::<f32>())
                .ok_or_else(|| ScaeError::Invalid(format!("{}: missing entry {name}", path.display())))
        };
        Ok(EmbeddingMatrix {
            slide_id: slide_id.to_string(),
            patch_size: get("patch_size")?.item() as u32,
            data: get("embedding")?,
            mask: get("mask")?,
        })
    }
}

/// Frozen-encoder vectors for a batch of resized patches, `[N, C]`.
pub fn encode_patches(model: &Scae, store: &ParamStore<f32>, patches: &[&RgbImage]) -> Result<Tensor<f32>> {
    let c = model.config.embedding_channels();
    let mut out = Vec::with_capacity(patches.len() * c);
    for chunk in patches.chunks(ENCODE_BATCH) {
        let (input, _) = patches_to_tensors(chunk, model.config.input)?;
        let mut g = Graph::eval();
        let x = g.constant(input);
        let (_, fg, bg, mask) = model.encode(&mut g, store, x)?;
        let v = pool_to_vector(g.value(fg), g.value(bg), &mask)?;
        out.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(&[patches.len(), c], out)?)
}

/// Encodes every kept cell of `scan` inside the patch-cell rectangle
/// `(row0, col0, rows, cols)`.
pub fn encode_scan(model: &Scae, store: &ParamStore<f32>, scan: &SlideScan, region: (usize, usize, usize, usize), slide_id: &str) -> Result<EmbeddingMatrix> {
    let (row0, col0, rows, cols) = region;
    let grid = &scan.grid;
    if row0 + rows > grid.rows || col0 + cols > grid.cols {
        return Err(ScaeError::Invalid(format!("region {region:?} outside {}x{} grid", grid.rows, grid.cols)));
    }
    let mut cells = Vec::new();
    let mut patches = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = (row0 + r) * grid.cols + col0 + c;
            if grid.is_kept(row0 + r, col0 + c) {
                let p = scan.patches[i]
                    .as_ref()
                    .ok_or_else(|| ScaeError::Invalid(format!("{slide_id}: kept cell ({r}, {c}) has no retained patch")))?;
                cells.push(r * cols + c);
                patches.push(p);
            }
        }
    }
    let ch = model.config.embedding_channels();
    let hw = rows * cols;
    let mut data = vec![0f32; ch * hw];
    let mut mask = vec![0f32; hw];
    if !patches.is_empty() {
        let v = encode_patches(model, store, &patches)?;
        for (n, &cell) in cells.iter().enumerate() {
            mask[cell] = 1.0;
            for k in 0..ch {
                data[k * hw + cell] = v.data()[n * ch + k];
            }
        }
    }
    Ok(EmbeddingMatrix {
        slide_id: slide_id.to_string(),
        patch_size: grid.patch_size,
        data: Tensor::from_vec(&[ch, rows, cols], data)?,
        mask: Tensor::from_vec(&[1, rows, cols], mask)?,
    })
}
