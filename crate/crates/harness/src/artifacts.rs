//! Image artifacts: ROC plots and CAM heatmaps.

use std::path::Path;

use gigaslide_core::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{HarnessError, Result};

const ROC_SIDE: u32 = 256;

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    img.save(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let to_px = |(x, y): (f64, f64)| (x * (ROC_SIDE - 1) as f64, (1.0 - y) * (ROC_SIDE - 1) as f64);
    let (p, q) = (to_px(a), to_px(b));
    let n = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
        img.put_pixel(x.round() as u32, y.round() as u32, color);
    }
}

/// ROC curve over the chance diagonal.
pub fn roc_png(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(ROC_SIDE, ROC_SIDE, Rgb([255, 255, 255]));
    line(&mut img, (0.0, 0.0), (1.0, 1.0), Rgb([190, 190, 190]));
    for w in points.windows(2) {
        line(&mut img, w[0], w[1], Rgb([200, 30, 30]));
    }
    save(&img, path)
}

/// Blue-to-red rendering of a `[H, W]` map with values in [0, 1], each cell
/// drawn as a `scale × scale` square.
pub fn heatmap_png(map: &Tensor<f32>, scale: u32, path: &Path) -> Result<()> {
    let (h, w) = (map.shape()[0] as u32, map.shape()[1] as u32);
    let img = RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let v = map.data()[((y / scale) * w + x / scale) as usize].clamp(0.0, 1.0);
        Rgb([(255.0 * v) as u8, (255.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8, (255.0 * (1.0 - v)) as u8])
    });
    save(&img, path)
}

/// Thumbnail level 0 (`[3L, H, W]`, values in [0, 1]) as an RGB image.
pub fn thumbnail_png(thumbnail: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (thumbnail.shape()[1] as u32, thumbnail.shape()[2] as u32);
    let d = thumbnail.data();
    let plane = (h * w) as usize;
    let img = RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    save(&img, path)
}
