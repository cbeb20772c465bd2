//! The dual-stream network: thumbnail stream, embedding stream, fusion and head.

use gigaslide_core::nn::{BatchNorm2d, Conv2d, Linear};
use gigaslide_core::sparse::mask_downsample;
use gigaslide_core::{Graph, ParamStore, Real, SparseVar, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;
use serde::Serialize;

use crate::blocks::{Aggregation, ConcurrentBottleneck, EmbeddingBlock, MultiScaleBlock, PlainSparseBlock};
use crate::config::DsnetConfig;
use crate::error::{DsnetError, Result};

/// One row of the block table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub stream: &'static str,
    pub block: &'static str,
    pub cin: usize,
    pub cout: usize,
    pub kernels: Vec<usize>,
    pub stride: usize,
}

/// A batch of padded inputs. The thumbnail grid is exactly twice the
/// embedding grid in both directions.
#[derive(Clone, Debug)]
pub struct DsnetInput<T> {
    /// `[B, 3L, 2H, 2W]`
    pub thumbnail: Tensor<T>,
    /// `[B, 1, 2H, 2W]`, 1 inside the slide extent.
    pub thumbnail_mask: Tensor<T>,
    /// `[B, C, H, W]`, zero at unobserved cells.
    pub embedding: Tensor<T>,
    /// `[B, 1, H, W]`
    pub embedding_mask: Tensor<T>,
}

impl<T: Real> DsnetInput<T> {
    pub fn batch(&self) -> usize {
        self.thumbnail.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct DsnetOutput<T> {
    /// `[B, classes]`
    pub logits: Var,
    /// Embedding-stream weight per item, when both streams are present.
    pub stream_score: Option<Tensor<T>>,
    /// Output of the head's 1×1 conv block, `[B, head, h, w]`.
    pub head_features: Var,
    /// Observation mask used by the head's sparse pooling, `[B, 1, h, w]`.
    pub pool_mask: Tensor<T>,
    /// Spatial extent after each block, for diagnostics.
    pub trace: Vec<(String, [usize; 2])>,
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Dsnet {
    pub config: DsnetConfig,
    stem: Option<Stem>,
    thumbnail_blocks: Vec<MultiScaleBlock>,
    embedding_blocks: Vec<EmbeddingBlock>,
    aggregation: Aggregation,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
    fc1: Linear,
    fc2: Linear,
}

impl Dsnet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: DsnetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.components;
        let (stem, thumbnail_blocks) = if c.thumbnail_stream {
            let k = config.stem_kernel;
            let stem = Stem {
                conv: Conv2d::new(store, "thumb.stem.conv", config.thumbnail_channels(), config.stem_channels, k, 2, k / 2, false, rng),
                bn: BatchNorm2d::new(store, "thumb.stem.bn", config.stem_channels),
            };
            let kernels = if c.multi_scale { config.ms_kernels.clone() } else { vec![3] };
            let mut cin = config.stem_channels;
            let mut blocks = Vec::new();
            for (i, (&w, &s)) in config.thumbnail_widths.iter().zip(&config.thumbnail_strides).enumerate() {
                blocks.push(MultiScaleBlock::new(store, &format!("thumb.ms{}", i + 1), cin, w, &kernels, s, rng)?);
                cin = w;
            }
            (Some(stem), blocks)
        } else {
            (None, Vec::new())
        };
        let mut embedding_blocks = Vec::new();
        if c.embedding_stream {
            let mut cin = config.embedding_channels;
            for (i, (&w, &s)) in config.embedding_widths.iter().zip(&config.embedding_strides).enumerate() {
                let name = format!("embed.cb{}", i + 1);
                embedding_blocks.push(if c.concurrent_bottleneck {
                    EmbeddingBlock::Bottleneck(ConcurrentBottleneck::new(
                        store,
                        &name,
                        cin,
                        w,
                        config.cb_kernel,
                        config.cb_reduction,
                        s,
                        c.spatial_bottleneck,
                        rng,
                    )?)
                } else {
                    EmbeddingBlock::Plain(PlainSparseBlock::new(store, &name, cin, w, s, rng))
                });
                cin = w;
            }
        }
        let fused = config.fused_channels();
        let aggregation = Aggregation::new(
            store,
            "agg",
            fused,
            c.thumbnail_stream && c.embedding_stream,
            c.stream_attention,
            c.channel_attention,
            config.se_reduction,
            rng,
        );
        let head_conv = Conv2d::new(store, "head.conv", fused, config.head_channels, 1, 1, 0, false, rng);
        let head_bn = BatchNorm2d::new(store, "head.bn", config.head_channels);
        let fc1 = Linear::new(store, "head.fc1", 2 * config.head_channels, config.hidden, rng);
        let fc2 = Linear::new(store, "head.fc2", config.hidden, config.classes, rng);
        let model = Dsnet {
            config,
            stem,
            thumbnail_blocks,
            embedding_blocks,
            aggregation,
            head_conv,
            head_bn,
            fc1,
            fc2,
        };
        log::info!("dsnet: {} trainable parameters", count_params(store));
        for (name, n) in model.param_breakdown(store) {
            log::debug!("  {name}: {n}");
        }
        Ok(model)
    }

    /// Block table of the constructed streams, in forward order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut rows = Vec::new();
        if let Some(stem) = &self.stem {
            rows.push(BlockSpec {
                stream: "thumbnail",
                block: "Conv",
                cin: stem.conv.cin,
                cout: stem.conv.cout,
                kernels: vec![stem.conv.k],
                stride: stem.conv.stride,
            });
        }
        for b in &self.thumbnail_blocks {
            rows.push(BlockSpec {
                stream: "thumbnail",
                block: "MS",
                cin: b.cin,
                cout: b.cout,
                kernels: b.paths.iter().map(|p| p.k).collect(),
                stride: b.stride,
            });
        }
        let mut cin = self.config.embedding_channels;
        for (b, (&w, &s)) in self
            .embedding_blocks
            .iter()
            .zip(self.config.embedding_widths.iter().zip(&self.config.embedding_strides))
        {
            let (block, kernels) = match b {
                EmbeddingBlock::Bottleneck(cb) => ("CB", vec![cb.kernel]),
                EmbeddingBlock::Plain(_) => ("Conv", vec![3]),
            };
            rows.push(BlockSpec {
                stream: "embedding",
                block,
                cin,
                cout: w,
                kernels,
                stride: s,
            });
            cin = w;
        }
        rows
    }

    /// Trainable parameter count per named block; sums to [`count_params`].
    pub fn param_breakdown<T: Real>(&self, store: &ParamStore<T>) -> Vec<(String, usize)> {
        let mut names: Vec<String> = Vec::new();
        if self.stem.is_some() {
            names.push("thumb.stem".into());
        }
        names.extend((1..=self.thumbnail_blocks.len()).map(|i| format!("thumb.ms{i}")));
        names.extend((1..=self.embedding_blocks.len()).map(|i| format!("embed.cb{i}")));
        names.push("agg".into());
        names.push("head".into());
        names
            .into_iter()
            .map(|n| {
                let count = store.count_prefix(&format!("{n}."));
                (n, count)
            })
            .collect()
    }

    fn check_input<T: Real>(&self, thumbnail: &Tensor<T>, embedding: &Tensor<T>, thumbnail_mask: &Tensor<T>, embedding_mask: &Tensor<T>) -> Result<()> {
        let extent = |block: &str, detail: String| {
            Err(DsnetError::Extent {
                block: block.into(),
                detail,
            })
        };
        let (b, ct, th, tw) = thumbnail.dims4()?;
        let (bv, cv, vh, vw) = embedding.dims4()?;
        if ct != self.config.thumbnail_channels() {
            return extent("input", format!("thumbnail has {ct} channels, expected {}", self.config.thumbnail_channels()));
        }
        if cv != self.config.embedding_channels {
            return extent("input", format!("embedding has {cv} channels, expected {}", self.config.embedding_channels));
        }
        if b != bv || th != 2 * vh || tw != 2 * vw {
            return extent(
                "input",
                format!("thumbnail {b}x{th}x{tw} is not twice embedding {bv}x{vh}x{vw}"),
            );
        }
        if vh % 4 != 0 || vw % 4 != 0 || vh == 0 || vw == 0 {
            return extent("input", format!("embedding grid {vh}x{vw} is not a positive multiple of 4"));
        }
        if thumbnail_mask.shape() != [b, 1, th, tw] || embedding_mask.shape() != [b, 1, vh, vw] {
            return extent("input", "mask shapes do not match their matrices".into());
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &DsnetInput<T>) -> Result<DsnetOutput<T>> {
        let t = g.constant(input.thumbnail.clone());
        let v = g.constant(input.embedding.clone());
        self.forward_vars(g, store, t, v, &input.thumbnail_mask, &input.embedding_mask)
    }

    /// As [`Dsnet::forward`] with the two matrices already on the graph.
    pub fn forward_vars<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        thumbnail: Var,
        embedding: Var,
        thumbnail_mask: &Tensor<T>,
        embedding_mask: &Tensor<T>,
    ) -> Result<DsnetOutput<T>> {
        self.check_input(g.value(thumbnail), g.value(embedding), thumbnail_mask, embedding_mask)?;
        let comp = self.config.components;
        let mut trace = Vec::new();
        let extent_of = |g: &Graph<T>, v: Var| {
            let s = g.shape(v);
            [s[2], s[3]]
        };

        let thumb = match &self.stem {
            Some(stem) => {
                let y = stem.conv.forward(g, store, thumbnail)?;
                let y = stem.bn.forward(g, store, y)?;
                let mut y = g.leaky_relu(y, LEAKY_SLOPE);
                trace.push(("thumb.stem".to_string(), extent_of(g, y)));
                for (i, b) in self.thumbnail_blocks.iter().enumerate() {
                    y = b.forward(g, store, y)?;
                    trace.push((format!("thumb.ms{}", i + 1), extent_of(g, y)));
                }
                Some(y)
            }
            None => None,
        };

        let embed = if self.embedding_blocks.is_empty() {
            None
        } else {
            let mask = if comp.sparse {
                embedding_mask.clone()
            } else {
                Tensor::ones(embedding_mask.shape())
            };
            let mut v = SparseVar { features: embedding, mask };
            for (i, b) in self.embedding_blocks.iter().enumerate() {
                v = b.forward(g, store, &v)?;
                trace.push((format!("embed.cb{}", i + 1), extent_of(g, v.features)));
            }
            Some(v)
        };

        if let (Some(t), Some(v)) = (thumb, &embed) {
            if g.shape(t) != g.shape(v.features) {
                let path = trace.iter().map(|(n, e)| format!("{n} {}x{}", e[0], e[1])).collect::<Vec<_>>().join(", ");
                return Err(DsnetError::Extent {
                    block: "aggregation".into(),
                    detail: format!("streams disagree ({:?} vs {:?}); block extents: {path}", g.shape(t), g.shape(v.features)),
                });
            }
        }
        let pool_mask = match &embed {
            Some(v) => v.mask.clone(),
            None => {
                let f = self.config.thumbnail_reduction();
                if comp.sparse {
                    mask_downsample(thumbnail_mask, f, f)?
                } else {
                    let (b, _, h, w) = thumbnail_mask.dims4()?;
                    Tensor::ones(&[b, 1, h / f, w / f])
                }
            }
        };
        let fused = self.aggregation.forward(g, store, thumb, embed.as_ref())?;

        let y = self.head_conv.forward(g, store, fused.features)?;
        let y = self.head_bn.forward(g, store, y)?;
        let head_features = g.leaky_relu(y, LEAKY_SLOPE);
        let (b, c, _, _) = g.value(head_features).dims4()?;
        let sparse_pool = g.sparse_global_pool(&SparseVar {
            features: head_features,
            mask: pool_mask.clone(),
        })?;
        let max_pool = g.global_max_pool(head_features)?;
        let max_pool = g.reshape(max_pool, &[b, c])?;
        let d = g.concat_features(&[sparse_pool, max_pool])?;
        let h = self.fc1.forward(g, store, d)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let logits = self.fc2.forward(g, store, h)?;
        Ok(DsnetOutput {
            logits,
            stream_score: fused.stream_score,
            head_features,
            pool_mask,
            trace,
        })
    }
}

/// Exact number of trainable scalars in the store.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}
