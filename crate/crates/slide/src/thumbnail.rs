//! Multi-level thumbnail matrix and compression accounting.

use gigaslide_core::Tensor;
use serde::Serialize;

use crate::error::{Result, SlideError};
use crate::grid::{scan_slide, ScanConfig, SlideScan, PAD_FILL};
use crate::source::SlideSource;

/// `3·L` channels stacked finest level first, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ThumbnailMatrix {
    pub data: Tensor<f32>,
    pub levels: Vec<u32>,
    pub k: u32,
}

impl ThumbnailMatrix {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Zero-pads bottom/right to `h × w`; also returns the in-extent mask `[1, h, w]`.
    pub fn padded(&self, h: usize, w: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (c, th, tw) = (self.channels(), self.height(), self.width());
        if h < th || w < tw {
            return Err(SlideError::Invalid(format!("cannot pad {th}x{tw} thumbnail to {h}x{w}")));
        }
        let src = self.data.data();
        let data = Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), i / w % h, i % w);
            if y < th && x < tw {
                src[(ch * th + y) * tw + x]
            } else {
                0.0
            }
        });
        let mask = Tensor::from_fn(&[1, h, w], |i| if i / w < th && i % w < tw { 1.0 } else { 0.0 });
        Ok((data, mask))
    }
}

/// Rounds `n` up to a multiple of `m`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Thumbnail over the patch-cell rectangle `(row0, col0, rows, cols)` of a
/// scanned slide. Level α averages `2^α × 2^α` groups of level-0 blocks
/// (aligned to the slide origin), then is repeated back to the level-0 grid.
pub fn build_thumbnail_matrix(scan: &SlideScan, region: (usize, usize, usize, usize), levels: &[u32]) -> Result<ThumbnailMatrix> {
    if levels.is_empty() {
        return Err(SlideError::Invalid("thumbnail needs at least one level".into()));
    }
    let (k, s) = (scan.block_size, scan.grid.patch_size);
    if s % k != 0 {
        return Err(SlideError::Invalid(format!("K = {k} must divide the patch size {s}")));
    }
    let f = (s / k) as usize;
    let (row0, col0, rows, cols) = region;
    let (h, w) = (rows * f, cols * f);
    let (y0, x0) = (row0 * f, col0 * f);
    let mut data = vec![0f32; 3 * levels.len() * h * w];
    for (li, &alpha) in levels.iter().enumerate() {
        let g = 1usize << alpha;
        let (gr, gc) = (scan.block_rows.div_ceil(g), scan.block_cols.div_ceil(g));
        // area average per level-α cell
        let mut sums = vec![[0f64; 3]; gr * gc];
        let mut counts = vec![0u64; gr * gc];
        for by in 0..scan.block_rows {
            for bx in 0..scan.block_cols {
                let b = by * scan.block_cols + bx;
                let j = (by / g) * gc + bx / g;
                for ch in 0..3 {
                    sums[j][ch] += scan.block_sums[b][ch];
                }
                counts[j] += scan.block_counts[b] as u64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = ((y0 + y) / g, (x0 + x) / g);
                let inside = gy < gr && gx < gc && counts[gy * gc + gx] > 0;
                for ch in 0..3 {
                    let v = if inside {
                        let j = gy * gc + gx;
                        sums[j][ch] / counts[j] as f64
                    } else {
                        PAD_FILL[ch] as f64
                    };
                    data[((li * 3 + ch) * h + y) * w + x] = (v / 255.0) as f32;
                }
            }
        }
    }
    Ok(ThumbnailMatrix {
        data: Tensor::from_vec(&[3 * levels.len(), h, w], data)?,
        levels: levels.to_vec(),
        k,
    })
}

/// Whole-slide thumbnail with no cropping (grid cells of size K).
pub fn slide_thumbnail(source: &dyn SlideSource, k: u32, levels: &[u32]) -> Result<ThumbnailMatrix> {
    let scan = scan_slide(
        source,
        ScanConfig {
            patch_size: k,
            k,
            resize_to: None,
            retain_sifted: false,
        },
    )?;
    build_thumbnail_matrix(&scan, (0, 0, scan.grid.rows, scan.grid.cols), levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompressionReport {
    pub thumbnail: f64,
    pub embedding: f64,
    pub combined: f64,
}

/// Raw pixel volume of a slide relative to its thumbnail (K²/L), embedding
/// (3S²/C) and combined thumbnail-plus-embedding representation.
pub fn compression_report(s: u32, c: u32, k: u32, l: u32) -> Result<CompressionReport> {
    if s == 0 || c == 0 || k == 0 || l == 0 {
        return Err(SlideError::Invalid("compression inputs must be positive".into()));
    }
    let (s, c, k, l) = (s as f64, c as f64, k as f64, l as f64);
    let pyramid: f64 = (0..l as u32).map(|a| 4f64.powi(a as i32) * 3.0).sum();
    Ok(CompressionReport {
        thumbnail: k * k / l,
        embedding: 3.0 * s * s / c,
        combined: 3.0 * s * s * k * k / (c * k * k + pyramid * s * s),
    })
}
