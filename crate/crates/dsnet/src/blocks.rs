//! Building blocks of the two streams and the fusion stage.

use gigaslide_core::nn::{BatchNorm2d, Conv2d, Linear, SeparableConv2d};
use gigaslide_core::{Graph, ParamStore, Real, SparseVar, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;

use crate::error::{DsnetError, Result};

/// Output widths of the parallel paths: equal shares, remainder to the first.
pub fn split_channels(cout: usize, paths: usize) -> Vec<usize> {
    let base = cout / paths;
    let mut out = vec![base; paths];
    out[0] += cout % paths;
    out
}

/// Parallel separable convolutions of different kernel sizes sharing one
/// stride, concatenated, then BN and Leaky ReLU.
#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    pub paths: Vec<SeparableConv2d>,
    pub bn: BatchNorm2d,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl MultiScaleBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernels: &[usize],
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernels.is_empty() || cout < kernels.len() {
            return Err(DsnetError::Config(format!(
                "{name}: {cout} output channels cannot feed {} paths",
                kernels.len()
            )));
        }
        let paths = kernels
            .iter()
            .zip(split_channels(cout, kernels.len()))
            .enumerate()
            .map(|(i, (&k, w))| SeparableConv2d::new(store, &format!("{name}.path{i}"), cin, w, k, stride, k / 2, false, rng))
            .collect();
        Ok(MultiScaleBlock {
            paths,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
            cin,
            cout,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let outs = self
            .paths
            .iter()
            .map(|p| p.forward(g, store, x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let y = if outs.len() == 1 { outs[0] } else { g.concat_channels(&outs)? };
        let y = self.bn.forward(g, store, y)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Sparse conv + sparse BN + Leaky ReLU, with the output confined to `mask`.
#[derive(Clone, Debug)]
struct SparseConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl SparseConvBn {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        SparseConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, 1, k / 2, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>, mask: &Tensor<T>, act: bool) -> Result<SparseVar<T>> {
        let y = self.conv.forward_sparse(g, store, x)?;
        // a k×k footprint dilates the mask; keep the block's observation set
        let y = if self.conv.k > 1 { g.remask(&y, mask)? } else { y };
        let y = self.bn.forward_sparse(g, store, &y)?;
        Ok(if act { g.sparse_leaky_relu(&y, LEAKY_SLOPE) } else { y })
    }
}

/// Channel bottleneck (1×1 reduce, two k×k convs, 1×1 expand) with a
/// parameter-free shortcut. With the spatial bottleneck on, the first inner
/// conv runs on a 2×2 max-pooled map that is upsampled back before the second.
/// Stride 2 is a 2×2 sparse average pool ahead of both branches.
#[derive(Clone, Debug)]
pub struct ConcurrentBottleneck {
    reduce: SparseConvBn,
    inner1: SparseConvBn,
    inner2: SparseConvBn,
    expand: SparseConvBn,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub spatial: bool,
}

impl ConcurrentBottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        reduction: usize,
        stride: usize,
        spatial: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = cin / reduction.max(1);
        if mid == 0 || cout < cin {
            return Err(DsnetError::Config(format!("{name}: bottleneck {cin} -> {mid} -> {cout}")));
        }
        let block = ConcurrentBottleneck {
            reduce: SparseConvBn::new(store, &format!("{name}.reduce"), cin, mid, 1, rng),
            inner1: SparseConvBn::new(store, &format!("{name}.inner1"), mid, mid, kernel, rng),
            inner2: SparseConvBn::new(store, &format!("{name}.inner2"), mid, mid, kernel, rng),
            expand: SparseConvBn::new(store, &format!("{name}.expand"), mid, cout, 1, rng),
            cin,
            mid,
            cout,
            kernel,
            stride,
            spatial,
        };
        // residual branch starts silent, so the block starts as its shortcut
        let gamma = block.expand.bn.gamma;
        store.get_mut(gamma).value = Tensor::zeros(&[cout]);
        Ok(block)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>) -> Result<SparseVar<T>> {
        let x = if self.stride == 2 { g.sparse_avg_pool(x, 2, 2)? } else { x.clone() };
        let mask = x.mask.clone();
        let (_, _, h, w) = g.value(x.features).dims4()?;
        let y = self.reduce.forward(g, store, &x, &mask, true)?;
        let y = if self.spatial && h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 {
            let p = g.sparse_max_pool(&y, 2, 2)?;
            let pmask = p.mask.clone();
            let p = self.inner1.forward(g, store, &p, &pmask, true)?;
            let u = g.sparse_upsample_nearest(&p, 2)?;
            let u = g.remask(&u, &mask)?;
            self.inner2.forward(g, store, &u, &mask, true)?
        } else {
            if self.spatial {
                log::debug!("bottleneck at {h}x{w}: spatial pooling skipped");
            }
            let y = self.inner1.forward(g, store, &y, &mask, true)?;
            self.inner2.forward(g, store, &y, &mask, true)?
        };
        let e = self.expand.forward(g, store, &y, &mask, false)?;
        let shortcut = if self.cout > self.cin {
            let (b, _, h, w) = g.value(x.features).dims4()?;
            let zeros = g.constant(Tensor::zeros(&[b, self.cout - self.cin, h, w]));
            g.concat_channels(&[x.features, zeros])?
        } else {
            x.features
        };
        let sum = g.add(shortcut, e.features)?;
        Ok(g.sparse_leaky_relu(&SparseVar { features: sum, mask }, LEAKY_SLOPE))
    }
}

/// Single 3×3 sparse conv block used where the bottleneck is ablated.
#[derive(Clone, Debug)]
pub struct PlainSparseBlock {
    body: SparseConvBn,
    pub stride: usize,
}

impl PlainSparseBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        PlainSparseBlock {
            body: SparseConvBn::new(store, name, cin, cout, 3, rng),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>) -> Result<SparseVar<T>> {
        let x = if self.stride == 2 { g.sparse_avg_pool(x, 2, 2)? } else { x.clone() };
        let mask = x.mask.clone();
        self.body.forward(g, store, &x, &mask, true)
    }
}

#[derive(Clone, Debug)]
pub enum EmbeddingBlock {
    Bottleneck(ConcurrentBottleneck),
    Plain(PlainSparseBlock),
}

impl EmbeddingBlock {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>) -> Result<SparseVar<T>> {
        match self {
            EmbeddingBlock::Bottleneck(b) => b.forward(g, store, x),
            EmbeddingBlock::Plain(b) => b.forward(g, store, x),
        }
    }
}

/// Result of fusing the two streams.
#[derive(Clone, Debug)]
pub struct Fused<T> {
    pub features: Var,
    /// Weight of the embedding stream per batch item (the thumbnail stream
    /// gets one minus this); `None` when only one stream exists.
    pub stream_score: Option<Tensor<T>>,
}

/// Stream-wise sigmoid gate followed by squeeze-and-excitation channel attention.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub stream_fc: Option<Linear>,
    pub squeeze: Option<(Linear, Linear)>,
    pub channels: usize,
}

impl Aggregation {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        two_streams: bool,
        stream_attention: bool,
        channel_attention: bool,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let stream_fc = (two_streams && stream_attention).then(|| Linear::new(store, &format!("{name}.stream"), 2 * channels, 1, rng));
        let squeeze = channel_attention.then(|| {
            let hidden = channels / reduction;
            (
                Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng),
                Linear::new(store, &format!("{name}.excite"), hidden, channels, rng),
            )
        });
        Aggregation {
            stream_fc,
            squeeze,
            channels,
        }
    }

    fn descriptor<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (b, c, _, _) = g.value(x).dims4()?;
        let p = g.global_avg_pool(x)?;
        Ok(g.reshape(p, &[b, c])?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, thumb: Option<Var>, embed: Option<&SparseVar<T>>) -> Result<Fused<T>> {
        let (features, stream_score) = match (thumb, embed) {
            (Some(t), Some(v)) => {
                let (ts, vs) = (g.shape(t).to_vec(), g.shape(v.features).to_vec());
                if ts != vs {
                    return Err(DsnetError::Extent {
                        block: "aggregation".into(),
                        detail: format!("thumbnail stream {ts:?} vs embedding stream {vs:?}"),
                    });
                }
                let b = ts[0];
                let s = match &self.stream_fc {
                    Some(fc) => {
                        let dt = Self::descriptor(g, t)?;
                        let dv = g.sparse_global_pool(v)?;
                        let d = g.concat_features(&[dt, dv])?;
                        let z = fc.forward(g, store, d)?;
                        g.sigmoid(z)
                    }
                    None => g.constant(Tensor::full(&[b, 1], T::lit(0.5))),
                };
                let score = g.value(s).clone().reshape(&[b])?;
                let s4 = g.reshape(s, &[b, 1, 1, 1])?;
                let rest = g.affine(s4, -T::one(), T::one());
                let a = g.mul(v.features, s4)?;
                let c = g.mul(t, rest)?;
                (g.add(a, c)?, Some(score))
            }
            (Some(t), None) => (t, None),
            (None, Some(v)) => (v.features, None),
            (None, None) => return Err(DsnetError::Config("aggregation needs a stream".into())),
        };
        let features = match &self.squeeze {
            Some((sq, ex)) => {
                let (b, c, _, _) = g.value(features).dims4()?;
                let d = Self::descriptor(g, features)?;
                let z = sq.forward(g, store, d)?;
                let z = g.relu(z);
                let z = ex.forward(g, store, z)?;
                let a = g.sigmoid(z);
                let a = g.reshape(a, &[b, c, 1, 1])?;
                g.mul(features, a)?
            }
            None => features,
        };
        Ok(Fused { features, stream_score })
    }
}
