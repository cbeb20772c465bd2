//! Tile-addressable slide access, backed by disk or by a procedural generator.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Result, SlideError};
use crate::manifest::{Lesion, SlideManifest, TileEntry};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Anything that can hand out RGB tiles of a gigapixel slide.
pub trait SlideSource {
    fn manifest(&self) -> &SlideManifest;

    /// Tile `(row, col)`. Edge tiles are cropped to the slide extent.
    fn read_tile(&self, row: u32, col: u32) -> Result<RgbImage>;

    fn slide_id(&self) -> &str {
        &self.manifest().slide_id
    }

    fn extent(&self) -> (u32, u32) {
        let m = self.manifest();
        (m.width, m.height)
    }

    fn label(&self) -> Option<u8> {
        self.manifest().label
    }

    fn lesions(&self) -> &[Lesion] {
        &self.manifest().lesions
    }

    /// Expected extent of tile `(row, col)`.
    fn tile_extent(&self, row: u32, col: u32) -> (u32, u32) {
        let m = self.manifest();
        let ts = m.tile_size;
        ((m.width - col * ts).min(ts), (m.height - row * ts).min(ts))
    }

    /// Arbitrary region; pixels beyond the slide extent are filled with `fill`.
    fn read_region(&self, x: u32, y: u32, w: u32, h: u32, fill: [u8; 3]) -> Result<RgbImage> {
        let m = self.manifest();
        let ts = m.tile_size;
        let mut out = RgbImage::from_pixel(w, h, image::Rgb(fill));
        let (x1, y1) = ((x + w).min(m.width), (y + h).min(m.height));
        if x >= x1 || y >= y1 {
            return Ok(out);
        }
        for row in y / ts..=(y1 - 1) / ts {
            for col in x / ts..=(x1 - 1) / ts {
                let tile = self.read_tile(row, col)?;
                let (tx0, ty0) = (col * ts, row * ts);
                for py in y.max(ty0)..y1.min(ty0 + tile.height()) {
                    for px in x.max(tx0)..x1.min(tx0 + tile.width()) {
                        out.put_pixel(px - x, py - y, *tile.get_pixel(px - tx0, py - ty0));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A slide stored as a directory: manifest document plus PNG tiles.
#[derive(Clone, Debug)]
pub struct StoredSlide {
    pub dir: PathBuf,
    manifest: SlideManifest,
}

impl StoredSlide {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = SlideManifest::load(&dir.join(MANIFEST_FILE))?;
        Ok(StoredSlide {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn entry(&self, row: u32, col: u32) -> Option<&TileEntry> {
        let cols = self.manifest.tile_cols();
        self.manifest
            .tiles
            .get((row * cols + col) as usize)
            .filter(|t| t.row == row && t.col == col)
            .or_else(|| self.manifest.tiles.iter().find(|t| t.row == row && t.col == col))
    }
}

impl SlideSource for StoredSlide {
    fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    fn read_tile(&self, row: u32, col: u32) -> Result<RgbImage> {
        let unreadable = |reason: String| SlideError::UnreadableTile {
            slide: self.manifest.slide_id.clone(),
            row,
            col,
            reason,
        };
        let entry = self.entry(row, col).ok_or_else(|| unreadable("not in manifest".into()))?;
        let img = image::open(self.dir.join(&entry.path)).map_err(|e| unreadable(e.to_string()))?;
        let img = img.to_rgb8();
        if (img.width(), img.height()) != self.tile_extent(row, col) {
            return Err(unreadable(format!(
                "extent {}x{}, expected {:?}",
                img.width(),
                img.height(),
                self.tile_extent(row, col)
            )));
        }
        Ok(img)
    }
}

/// Writes every tile of `source` as lossless PNG plus the manifest into `dir`.
pub fn write_slide(source: &dyn SlideSource, dir: &Path) -> Result<StoredSlide> {
    let manifest = source.manifest().clone();
    manifest.validate(None)?;
    std::fs::create_dir_all(dir)?;
    for t in &manifest.tiles {
        let path = dir.join(&t.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        source
            .read_tile(t.row, t.col)?
            .save_with_format(&path, ImageFormat::Png)
            .map_err(|e| SlideError::Io(std::io::Error::other(e.to_string())))?;
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    StoredSlide::open(dir)
}
