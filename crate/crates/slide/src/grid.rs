//! Patch grid, run-length sifting and bounding-box cropping.

use image::{imageops, RgbImage};

use crate::error::{Result, SlideError};
use crate::source::SlideSource;

/// Pixels past the slide extent in edge patches are filled with this.
pub const PAD_FILL: [u8; 3] = [255, 255, 255];
pub const QUANT_LEVELS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellState {
    Kept,
    Sifted,
    OutOfBbox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: u32,
    pub states: Vec<CellState>,
    /// Mean grayscale intensity per cell, 0..255.
    pub mean_intensity: Vec<f32>,
    pub tokens: Vec<u32>,
}

/// Grayscale as channel mean, quantized to 32 levels.
#[inline]
pub fn quantize(p: &[u8; 3]) -> u8 {
    (((p[0] as u16 + p[1] as u16 + p[2] as u16) / 3) >> 3) as u8
}

/// Row-major run-length token count of the quantized grayscale image.
pub fn rle_token_count(img: &RgbImage) -> u32 {
    let mut tokens = 0;
    for row in img.rows() {
        let mut prev = None;
        for p in row {
            let q = quantize(&p.0);
            if prev != Some(q) {
                tokens += 1;
                prev = Some(q);
            }
        }
    }
    tokens
}

pub fn mean_intensity(img: &RgbImage) -> f32 {
    let n = (img.width() * img.height()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let sum: f64 = img.pixels().map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).sum();
    (sum / n) as f32
}

/// Two-class (Otsu) split of a set of counts: returns `t` maximizing the
/// between-class variance of `{c <= t}` and `{c > t}`. `None` when all
/// counts are equal (or the set is empty).
pub fn otsu_threshold(counts: &[u32]) -> Option<u32> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().map(|&c| c as f64).sum();
    let mut best: Option<(f64, u32)> = None;
    let mut below = 0.0;
    let mut sum_below = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            below += 1.0;
            sum_below += v as f64;
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let above = n - below;
        let m0 = sum_below / below;
        let m1 = (total - sum_below) / above;
        let between = below * above * (m0 - m1).powi(2);
        if best.map_or(true, |(b, _)| between > b) {
            best = Some((between, v));
        }
    }
    best.map(|(_, t)| t)
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, r: usize, c: usize) -> CellState {
        self.states[r * self.cols + c]
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.state(r, c) == CellState::Kept
    }

    pub fn kept_count(&self) -> usize {
        self.states.iter().filter(|&&s| s == CellState::Kept).count()
    }

    /// Marks cells with more than `threshold` tokens as kept, the rest as
    /// sifted. Out-of-box cells are left alone.
    pub fn apply_threshold(&mut self, threshold: Option<u32>) {
        for (s, &t) in self.states.iter_mut().zip(&self.tokens) {
            if *s == CellState::OutOfBbox {
                continue;
            }
            *s = match threshold {
                Some(th) if t > th => CellState::Kept,
                _ => CellState::Sifted,
            };
        }
    }

    /// Minimal sub-grid holding every kept cell, with its `(row, col)` offset.
    pub fn crop_bounding_box(&self, slide_id: &str) -> Result<(PatchGrid, (usize, usize))> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.is_kept(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        if r0 == usize::MAX {
            return Err(SlideError::EmptySlide(slide_id.to_string()));
        }
        let (rows, cols) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut out = PatchGrid {
            rows,
            cols,
            patch_size: self.patch_size,
            states: Vec::with_capacity(rows * cols),
            mean_intensity: Vec::with_capacity(rows * cols),
            tokens: Vec::with_capacity(rows * cols),
        };
        for r in r0..=r1 {
            let span = r * self.cols + c0..r * self.cols + c1 + 1;
            out.states.extend_from_slice(&self.states[span.clone()]);
            out.mean_intensity.extend_from_slice(&self.mean_intensity[span.clone()]);
            out.tokens.extend_from_slice(&self.tokens[span]);
        }
        Ok((out, (r0, c0)))
    }
}

/// Everything gathered in one pass over a slide's tiles.
#[derive(Clone, Debug)]
pub struct SlideScan {
    pub grid: PatchGrid,
    /// RLE threshold chosen for the slide; `None` if all counts were equal.
    pub threshold: Option<u32>,
    /// Level-0 thumbnail accumulation: per K×K block, RGB sums over in-extent pixels.
    pub block_sums: Vec<[f64; 3]>,
    pub block_counts: Vec<u32>,
    pub block_rows: usize,
    pub block_cols: usize,
    pub block_size: u32,
    /// Per cell, the patch resized for encoding (if requested; kept cells only
    /// unless `retain_sifted`).
    pub patches: Vec<Option<RgbImage>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScanConfig {
    pub patch_size: u32,
    pub k: u32,
    /// Side of the resized patches to retain; `None` skips patch retention.
    pub resize_to: Option<u32>,
    /// Also retain patches of sifted cells.
    pub retain_sifted: bool,
}

/// Reads every patch once: RLE token counts, mean intensity, thumbnail block
/// sums, and optionally resized patch images. Then thresholds the grid.
pub fn scan_slide(source: &dyn SlideSource, cfg: ScanConfig) -> Result<SlideScan> {
    let s = cfg.patch_size;
    if s == 0 || cfg.k == 0 {
        return Err(SlideError::Invalid("patch size and K must be positive".into()));
    }
    source.manifest().validate(Some(s))?;
    let (w, h) = source.extent();
    let rows = h.div_ceil(s) as usize;
    let cols = w.div_ceil(s) as usize;
    let block_rows = h.div_ceil(cfg.k) as usize;
    let block_cols = w.div_ceil(cfg.k) as usize;
    let mut scan = SlideScan {
        grid: PatchGrid {
            rows,
            cols,
            patch_size: s,
            states: vec![CellState::Sifted; rows * cols],
            mean_intensity: vec![0.0; rows * cols],
            tokens: vec![0; rows * cols],
        },
        threshold: None,
        block_sums: vec![[0.0; 3]; block_rows * block_cols],
        block_counts: vec![0; block_rows * block_cols],
        block_rows,
        block_cols,
        block_size: cfg.k,
        patches: vec![None; rows * cols],
    };
    // work unit: one tile, or one patch when patches span several tiles
    let unit = source.manifest().tile_size.max(s);
    for uy in (0..h).step_by(unit as usize) {
        for ux in (0..w).step_by(unit as usize) {
            let region = source.read_region(ux, uy, unit, unit, PAD_FILL)?;
            for (px, py, p) in region.enumerate_pixels() {
                let (x, y) = (ux + px, uy + py);
                if x < w && y < h {
                    let b = (y / cfg.k) as usize * block_cols + (x / cfg.k) as usize;
                    for ch in 0..3 {
                        scan.block_sums[b][ch] += p[ch] as f64;
                    }
                    scan.block_counts[b] += 1;
                }
            }
            for oy in (0..unit).step_by(s as usize) {
                for ox in (0..unit).step_by(s as usize) {
                    let (r, c) = (((uy + oy) / s) as usize, ((ux + ox) / s) as usize);
                    if r >= rows || c >= cols {
                        continue;
                    }
                    let patch = imageops::crop_imm(&region, ox, oy, s, s).to_image();
                    let i = r * cols + c;
                    scan.grid.tokens[i] = rle_token_count(&patch);
                    scan.grid.mean_intensity[i] = mean_intensity(&patch);
                    if let Some(side) = cfg.resize_to {
                        scan.patches[i] = Some(if side == s {
                            patch
                        } else {
                            imageops::resize(&patch, side, side, imageops::FilterType::Triangle)
                        });
                    }
                }
            }
        }
    }
    scan.threshold = otsu_threshold(&scan.grid.tokens);
    scan.grid.apply_threshold(scan.threshold);
    for (p, st) in scan.patches.iter_mut().zip(&scan.grid.states) {
        if *st != CellState::Kept && !cfg.retain_sifted {
            *p = None;
        }
    }
    Ok(scan)
}

/// Sifts a slide without retaining patches.
pub fn sift_patches(source: &dyn SlideSource, patch_size: u32) -> Result<PatchGrid> {
    Ok(scan_slide(
        source,
        ScanConfig {
            patch_size,
            k: patch_size,
            resize_to: None,
            retain_sifted: false,
        },
    )?
    .grid)
}
