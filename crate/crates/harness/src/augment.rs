//! Geometric augmentation applied identically to both streams.

use gigaslide_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SlideSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub flips: bool,
    /// Quarter turns only, so the two grids stay aligned.
    pub rotations: bool,
    /// Most embedding cells discarded along either axis.
    pub max_crop: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flips: true,
            rotations: true,
            max_crop: 7,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            flips: false,
            rotations: false,
            max_crop: 0,
        }
    }
}

/// Crop (in embedding cells), then flips, then clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    /// Cells discarded at `[top, bottom, left, right]`.
    pub crop: [usize; 4],
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn identity() -> Self {
        Transform::default()
    }

    /// Random transform for an `h × w` embedding grid. A crop never removes
    /// more than half of an axis.
    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, h: usize, w: usize, rng: &mut R) -> Self {
        let mut split = |n: usize| {
            let total = rng.gen_range(0..=spec.max_crop.min(n / 2));
            let first = rng.gen_range(0..=total);
            (first, total - first)
        };
        let (top, bottom) = split(h);
        let (left, right) = split(w);
        Transform {
            crop: [top, bottom, left, right],
            flip_h: spec.flips && rng.gen_bool(0.5),
            flip_v: spec.flips && rng.gen_bool(0.5),
            quarter_turns: if spec.rotations { rng.gen_range(0..4) } else { 0 },
        }
    }

    /// Where embedding cell `(y, x)` of an `h × w` grid lands, if it survives the crop.
    pub fn map_cell(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let [t, b, l, r] = self.crop;
        if y < t || y + b >= h || x < l || x + r >= w {
            return None;
        }
        let (mut y, mut x, mut h, mut w) = (y - t, x - l, h - t - b, w - l - r);
        if self.flip_h {
            x = w - 1 - x;
        }
        if self.flip_v {
            y = h - 1 - y;
        }
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (x, h - 1 - y);
            (h, w) = (w, h);
        }
        Some((y, x))
    }

    /// Applies the transform to a `[C, H, W]` tensor whose cells are `scale`
    /// times finer than embedding cells.
    pub fn apply(&self, t: &Tensor<f32>, scale: usize) -> Tensor<f32> {
        let [top, bottom, left, right] = self.crop.map(|v| v * scale);
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h - top - bottom, w - left - right);
        let src = t.data();
        let (th, tw) = if self.quarter_turns % 2 == 1 { (ow, oh) } else { (oh, ow) };
        let mut out = vec![0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut fx = if self.flip_h { ow - 1 - x } else { x };
                    let mut fy = if self.flip_v { oh - 1 - y } else { y };
                    let (mut ch_, mut cw) = (oh, ow);
                    for _ in 0..self.quarter_turns % 4 {
                        (fy, fx) = (fx, ch_ - 1 - fy);
                        (ch_, cw) = (cw, ch_);
                    }
                    out[(ch * th + fy) * tw + fx] = src[(ch * h + y + top) * w + x + left];
                }
            }
        }
        Tensor::from_vec(&[c, th, tw], out).expect("extent preserved")
    }

    pub fn apply_sample(&self, s: &SlideSample) -> SlideSample {
        SlideSample {
            slide_id: s.slide_id.clone(),
            label: s.label,
            pixel_count: s.pixel_count,
            thumbnail: self.apply(&s.thumbnail, 2),
            thumbnail_mask: self.apply(&s.thumbnail_mask, 2),
            embedding: self.apply(&s.embedding, 1),
            embedding_mask: self.apply(&s.embedding_mask, 1),
        }
    }
}

pub fn augment<R: Rng + ?Sized>(s: &SlideSample, spec: &AugmentSpec, rng: &mut R) -> SlideSample {
    let (h, w) = s.grid();
    Transform::sample(spec, h, w, rng).apply_sample(s)
}
