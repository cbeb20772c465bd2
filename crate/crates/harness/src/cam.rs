//! Class activation maps scored against ground-truth lesion geometry.

use gigaslide_core::{ParamStore, Tensor};
use gigaslide_dsnet::{grad_cam, Dsnet};
use serde::Serialize;

use crate::data::{collate, SlideSample};
use crate::error::Result;
use crate::preprocess::SlideMeta;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CamLocalization {
    pub slide_id: String,
    pub inside_mean: Option<f64>,
    pub outside_mean: Option<f64>,
    pub inside_cells: usize,
    pub outside_cells: usize,
}

impl CamLocalization {
    /// The map is hotter on lesion cells than elsewhere.
    pub fn localizes(&self) -> bool {
        matches!((self.inside_mean, self.outside_mean), (Some(i), Some(o)) if i > o)
    }
}

/// Positive-class map of one slide cropped to its thumbnail grid `[2h, 2w]`.
pub fn slide_cam(model: &Dsnet, store: &ParamStore<f32>, sample: &SlideSample, pad_multiple: usize) -> Result<Tensor<f32>> {
    let input = collate(&[sample], pad_multiple)?;
    let map = grad_cam(model, store, &input, 1)?;
    let (h, w) = sample.grid();
    let (th, tw) = (2 * h, 2 * w);
    let full_w = map.shape()[1];
    Ok(Tensor::from_fn(&[th, tw], |i| map.data()[(i / tw) * full_w + i % tw]))
}

/// Mean map value over thumbnail cells whose centre falls inside any lesion,
/// and over all other cells.
pub fn score_cam(map: &Tensor<f32>, meta: &SlideMeta) -> CamLocalization {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (s, k) = (meta.patch_size as f64, meta.k as f64);
    let (y0, x0) = (meta.origin.0 as f64 * s, meta.origin.1 as f64 * s);
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (x0 + (j as f64 + 0.5) * k, y0 + (i as f64 + 0.5) * k);
            let v = map.data()[i * w + j] as f64;
            let acc = if meta.lesions.iter().any(|l| l.contains(x, y)) { &mut inside } else { &mut outside };
            acc.0 += v;
            acc.1 += 1;
        }
    }
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    CamLocalization {
        slide_id: meta.slide_id.clone(),
        inside_mean: mean(inside),
        outside_mean: mean(outside),
        inside_cells: inside.1,
        outside_cells: outside.1,
    }
}
