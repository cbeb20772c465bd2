//! Network-ready slide tensors and batch collation.

use gigaslide_core::Tensor;
use gigaslide_dsnet::DsnetInput;
use gigaslide_slide::thumbnail::round_up;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::preprocess::PreparedSlide;

/// Which embedding channels feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// Foreground and background channels together.
    Separated,
    ForegroundOnly,
    BackgroundOnly,
    /// Embeddings from a single-branch encoder (a separately prepared corpus).
    Mixed,
}

impl EncodingMode {
    /// Channel range `(start, len)` of a separated embedding with `fg` foreground channels.
    pub fn channel_range(self, fg: usize, total: usize) -> (usize, usize) {
        match self {
            EncodingMode::Separated | EncodingMode::Mixed => (0, total),
            EncodingMode::ForegroundOnly => (0, fg),
            EncodingMode::BackgroundOnly => (fg, total - fg),
        }
    }
}

/// One slide's inputs: thumbnail `[3L, 2h, 2w]` with mask `[1, 2h, 2w]`,
/// embedding `[C, h, w]` with mask `[1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideSample {
    pub slide_id: String,
    pub label: u8,
    pub pixel_count: u64,
    pub thumbnail: Tensor<f32>,
    pub thumbnail_mask: Tensor<f32>,
    pub embedding: Tensor<f32>,
    pub embedding_mask: Tensor<f32>,
}

fn narrow3(t: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let out = t.clone().reshape(&[1, c, h, w])?.narrow_channels(start, len)?;
    Ok(out.reshape(&[len, h, w])?)
}

impl SlideSample {
    /// The first `levels` thumbnail levels and the `(start, len)` embedding channels.
    pub fn from_prepared(p: &PreparedSlide, levels: usize, channels: (usize, usize)) -> Result<Self> {
        let t = &p.thumbnail;
        if levels == 0 || levels > t.levels.len() {
            return Err(HarnessError::Config(format!(
                "{}: {levels} thumbnail levels requested, {} stored",
                p.meta.slide_id,
                t.levels.len()
            )));
        }
        let (h, w) = (p.embedding.height(), p.embedding.width());
        if t.height() != 2 * h || t.width() != 2 * w {
            return Err(HarnessError::Data(format!(
                "{}: thumbnail {}x{} is not twice the embedding {h}x{w}",
                p.meta.slide_id,
                t.height(),
                t.width()
            )));
        }
        Ok(SlideSample {
            slide_id: p.meta.slide_id.clone(),
            label: p.meta.label,
            pixel_count: p.meta.pixel_count(),
            thumbnail: narrow3(&t.data, 0, 3 * levels)?,
            thumbnail_mask: Tensor::ones(&[1, 2 * h, 2 * w]),
            embedding: narrow3(&p.embedding.data, channels.0, channels.1)?,
            embedding_mask: p.embedding.mask.clone(),
        })
    }

    /// Embedding grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.embedding.shape();
        (s[1], s[2])
    }
}

fn pad3(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, th, tw) = (s[0], s[1], s[2]);
    let src = t.data();
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        if y < th && x < tw {
            src[(ch * th + y) * tw + x]
        } else {
            0.0
        }
    })
}

/// Zero-pads every sample to the batch maximum embedding grid rounded up to
/// `multiple` (thumbnail to twice that) and stacks them.
pub fn collate(samples: &[&SlideSample], multiple: usize) -> Result<DsnetInput<f32>> {
    if samples.is_empty() || multiple == 0 {
        return Err(HarnessError::Data("cannot collate an empty batch".into()));
    }
    let h = round_up(samples.iter().map(|s| s.grid().0).max().unwrap_or(1).max(1), multiple);
    let w = round_up(samples.iter().map(|s| s.grid().1).max().unwrap_or(1).max(1), multiple);
    let stack = |f: &dyn Fn(&SlideSample) -> Tensor<f32>| -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = samples.iter().map(|s| f(s)).collect();
        Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
    };
    Ok(DsnetInput {
        thumbnail: stack(&|s| pad3(&s.thumbnail, 2 * h, 2 * w))?,
        thumbnail_mask: stack(&|s| pad3(&s.thumbnail_mask, 2 * h, 2 * w))?,
        embedding: stack(&|s| pad3(&s.embedding, h, w))?,
        embedding_mask: stack(&|s| pad3(&s.embedding_mask, h, w))?,
    })
}
