//! Slide classifiers driven by the training loop: the dual-stream network and
//! a small dense CNN on level-0 thumbnails.

use gigaslide_core::nn::{BatchNorm2d, Conv2d, Linear};
use gigaslide_core::sparse::mask_downsample;
use gigaslide_core::{Graph, ParamStore, SparseVar, Tensor, Var, LEAKY_SLOPE};
use gigaslide_dsnet::{Dsnet, DsnetInput};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub struct Prediction {
    /// `[B, classes]`
    pub logits: Var,
    /// Embedding-stream weight per item, when the model has one.
    pub stream_score: Option<Tensor<f32>>,
}

pub trait SlideClassifier {
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, input: &DsnetInput<f32>) -> Result<Prediction>;
}

impl SlideClassifier for Dsnet {
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, input: &DsnetInput<f32>) -> Result<Prediction> {
        let out = Dsnet::forward(self, g, store, input)?;
        Ok(Prediction {
            logits: out.logits,
            stream_score: out.stream_score,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveConfig {
    /// One stride-2 conv stage per entry.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
}

impl Default for NaiveConfig {
    fn default() -> Self {
        NaiveConfig {
            widths: vec![16, 32, 64, 128],
            kernel: 3,
            classes: 2,
        }
    }
}

/// Stride-2 conv + BN + Leaky ReLU stages on the level-0 thumbnail, masked
/// global average pooling and one linear layer.
#[derive(Clone, Debug)]
pub struct NaiveCnn {
    pub config: NaiveConfig,
    stages: Vec<(Conv2d, BatchNorm2d)>,
    fc: Linear,
}

impl NaiveCnn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, config: NaiveConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.kernel % 2 == 0 || config.classes < 2 {
            return Err(HarnessError::Config(format!("naive baseline: {config:?}")));
        }
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let name = format!("naive.stage{}", i + 1);
            let conv = Conv2d::new(store, &format!("{name}.conv"), cin, w, config.kernel, 2, config.kernel / 2, false, rng);
            stages.push((conv, BatchNorm2d::new(store, &format!("{name}.bn"), w)));
            cin = w;
        }
        let fc = Linear::new(store, "naive.fc", cin, config.classes, rng);
        Ok(NaiveCnn { config, stages, fc })
    }

    /// Total downsampling of the thumbnail grid.
    pub fn reduction(&self) -> usize {
        1 << self.stages.len()
    }
}

impl SlideClassifier for NaiveCnn {
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, input: &DsnetInput<f32>) -> Result<Prediction> {
        let (_, _, h, w) = input.thumbnail.dims4()?;
        let f = self.reduction();
        if h % f != 0 || w % f != 0 {
            return Err(HarnessError::Data(format!("thumbnail {h}x{w} is not a multiple of {f}")));
        }
        let mut x = g.constant(input.thumbnail.narrow_channels(0, 3)?);
        for (conv, bn) in &self.stages {
            let y = conv.forward(g, store, x)?;
            let y = bn.forward(g, store, y)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let pooled = g.sparse_global_pool(&SparseVar {
            features: x,
            mask: mask_downsample(&input.thumbnail_mask, f, f)?,
        })?;
        Ok(Prediction {
            logits: self.fc.forward(g, store, pooled)?,
            stream_score: None,
        })
    }
}
