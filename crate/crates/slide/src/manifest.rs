//! Per-slide manifest document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlideError};

/// Ground-truth lesion geometry in slide pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lesion {
    Disk { cx: f64, cy: f64, r: f64 },
    /// Closed polygon, vertices in order.
    Polygon { points: Vec<(f64, f64)> },
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Lesion::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Lesion::Polygon { points } => {
                // even-odd ray casting
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let (xi, yi) = points[i];
                    let (xj, yj) = points[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    pub fn is_disk(&self) -> bool {
        matches!(self, Lesion::Disk { .. })
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Lesion::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Lesion::Polygon { points } => points.iter().fold(
                (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    pub row: u32,
    pub col: u32,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub magnification: String,
    pub label: Option<u8>,
    pub lesions: Vec<Lesion>,
    pub tiles: Vec<TileEntry>,
}

pub fn tile_path(row: u32, col: u32) -> String {
    format!("tiles/r{row:04}_c{col:04}.png")
}

impl SlideManifest {
    pub fn tile_rows(&self) -> u32 {
        self.height.div_ceil(self.tile_size)
    }

    pub fn tile_cols(&self) -> u32 {
        self.width.div_ceil(self.tile_size)
    }

    /// Full tile table in row-major order.
    pub fn default_tiles(width: u32, height: u32, tile_size: u32) -> Vec<TileEntry> {
        let mut tiles = Vec::new();
        for row in 0..height.div_ceil(tile_size) {
            for col in 0..width.div_ceil(tile_size) {
                tiles.push(TileEntry {
                    row,
                    col,
                    path: tile_path(row, col),
                });
            }
        }
        tiles
    }

    /// Checks that the tile table covers every pixel exactly once and that the
    /// tile size is compatible with `patch_size`.
    pub fn validate(&self, patch_size: Option<u32>) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.tile_size == 0 {
            return Err(SlideError::Manifest(format!("{}: zero extent or tile size", self.slide_id)));
        }
        let (rows, cols) = (self.tile_rows(), self.tile_cols());
        let mut seen = vec![false; (rows * cols) as usize];
        for t in &self.tiles {
            if t.row >= rows || t.col >= cols {
                return Err(SlideError::Manifest(format!(
                    "{}: tile ({}, {}) outside {}x{} tile grid",
                    self.slide_id, t.row, t.col, rows, cols
                )));
            }
            let i = (t.row * cols + t.col) as usize;
            if seen[i] {
                return Err(SlideError::Manifest(format!("{}: tile ({}, {}) listed twice", self.slide_id, t.row, t.col)));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(SlideError::Manifest(format!(
                "{}: tile ({}, {}) missing",
                self.slide_id,
                i as u32 / cols,
                i as u32 % cols
            )));
        }
        if let Some(s) = patch_size {
            if s == 0 || (self.tile_size % s != 0 && s % self.tile_size != 0) {
                return Err(SlideError::Manifest(format!(
                    "{}: tile size {} incompatible with patch size {}",
                    self.slide_id, self.tile_size, s
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: SlideManifest = serde_json::from_str(&text).map_err(|e| SlideError::Manifest(format!("{}: {e}", path.display())))?;
        m.validate(None)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SlideError::Manifest(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
