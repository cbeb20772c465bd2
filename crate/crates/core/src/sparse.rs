//! Mask-aware operators for feature maps with unobserved (zero-filled) sites.
//!
//! Every feature map travels with a binary observation mask `[B, 1, H, W]`.
//! Statistics and pooling only see observed entries, and every operator
//! returns features that are exactly zero wherever its output mask is zero.

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::conv::out_extent;
use crate::ops::norm::{check_affine, BatchStats};
use crate::tensor::{Real, Tensor};

/// Added to the normalization denominator of [`Graph::sparse_conv2d`].
pub const SPARSE_CONV_EPS: f64 = 1e-8;

/// Features `[B, C, H, W]` with observation mask `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTensor<T> {
    pub features: Tensor<T>,
    pub mask: Tensor<T>,
}

fn check_mask_shape<T: Real>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let (b, _, h, w) = features.dims4()?;
    if mask.shape() != [b, 1, h, w] {
        return Err(shape_err(
            "masked_tensor",
            format!("mask {:?} does not match features {:?}", mask.shape(), features.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> MaskedTensor<T> {
    /// Validates all three invariants: matching extent, binary mask, zeros where unobserved.
    pub fn new(features: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        check_mask_shape(&features, &mask)?;
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(invalid("masked_tensor", "mask must contain only 0 and 1"));
        }
        let m = MaskedTensor { features, mask };
        if !m.is_closed() {
            return Err(invalid("masked_tensor", "features are nonzero at unobserved sites"));
        }
        Ok(m)
    }

    /// Builds a masked tensor, zeroing features at unobserved sites.
    pub fn with_zeroing(mut features: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        check_mask_shape(&features, &mask)?;
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(invalid("masked_tensor", "mask must contain only 0 and 1"));
        }
        let (b, c, h, w) = features.dims4()?;
        let hw = h * w;
        let md = mask.data().to_vec();
        let fd = features.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..hw {
                    fd[(bi * c + ci) * hw + i] *= md[bi * hw + i];
                }
            }
        }
        Ok(MaskedTensor { features, mask })
    }

    /// Every site observed.
    pub fn full(features: Tensor<T>) -> Result<Self> {
        let (b, _, h, w) = features.dims4()?;
        Ok(MaskedTensor {
            features,
            mask: Tensor::ones(&[b, 1, h, w]),
        })
    }

    /// True when every feature at an unobserved site is exactly zero.
    pub fn is_closed(&self) -> bool {
        let Ok((b, c, h, w)) = self.features.dims4() else {
            return false;
        };
        let hw = h * w;
        let (fd, md) = (self.features.data(), self.mask.data());
        (0..b).all(|bi| {
            (0..hw).all(|i| md[bi * hw + i] != T::zero() || (0..c).all(|ci| fd[(bi * c + ci) * hw + i] == T::zero()))
        })
    }

    /// Observed-site count per batch item.
    pub fn observed_counts(&self) -> Vec<usize> {
        let (b, _, h, w) = self.features.dims4().unwrap();
        self.mask
            .data()
            .chunks(h * w)
            .take(b)
            .map(|p| p.iter().filter(|&&m| m != T::zero()).count())
            .collect()
    }
}

/// Sparsity-aware mean `Σ(F⊙O) / ΣO`, per batch item and channel: `[B, C]`.
pub fn sparse_mean<T: Real>(m: &MaskedTensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = m.features.dims4()?;
    check_mask_shape(&m.features, &m.mask)?;
    let hw = h * w;
    let (fd, md) = (m.features.data(), m.mask.data());
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        let mask = &md[bi * hw..][..hw];
        let count: T = mask.iter().copied().sum();
        if count == T::zero() {
            return Err(TensorError::EmptyObservation {
                context: format!("sparse_mean, batch item {}", bi),
            });
        }
        for ci in 0..c {
            let f = &fd[(bi * c + ci) * hw..][..hw];
            let s: T = f.iter().zip(mask).map(|(&x, &o)| x * o).sum();
            out[bi * c + ci] = s / count;
        }
    }
    Tensor::from_vec(&[b, c], out)
}

/// Sparsity-aware variance with the over-weighting correction:
/// `(Σ_ij (F − mean_s)² − β) / ΣO`, `β = Σ_ij (1 − O)·mean_s²`.
///
/// The sum in the numerator runs over every site; unobserved sites hold
/// zeros and contribute exactly `mean_s²` each, which `β` removes.
pub fn sparse_var<T: Real>(m: &MaskedTensor<T>) -> Result<Tensor<T>> {
    let mean = sparse_mean(m)?;
    let (b, c, h, w) = m.features.dims4()?;
    let hw = h * w;
    let (fd, md) = (m.features.data(), m.mask.data());
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        let mask = &md[bi * hw..][..hw];
        let count: T = mask.iter().copied().sum();
        let unobserved: T = mask.iter().map(|&o| T::one() - o).sum();
        for ci in 0..c {
            let mu = mean.data()[bi * c + ci];
            let f = &fd[(bi * c + ci) * hw..][..hw];
            let total: T = f.iter().map(|&x| (x - mu) * (x - mu)).sum();
            let beta = unobserved * mu * mu;
            out[bi * c + ci] = (total - beta) / count;
        }
    }
    Tensor::from_vec(&[b, c], out)
}

/// Per-channel global pooling over observed sites, `[B, C]`.
pub fn sparse_global_pool_values<T: Real>(m: &MaskedTensor<T>) -> Result<Tensor<T>> {
    sparse_mean(m)
}

/// Coarsens a `[B, 1, H, W]` mask: a coarse cell is observed iff any covered
/// fine cell is observed.
pub fn mask_downsample<T: Real>(mask: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(shape_err("mask_downsample", format!("mask must have one channel, got {:?}", mask.shape())));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, k, stride, 0), out_extent(w, k, stride, 0)) else {
        return Err(invalid("mask_downsample", format!("window {} stride {} on {}x{}", k, stride, h, w)));
    };
    let md = mask.data();
    let mut out = vec![T::zero(); b * ho * wo];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let any = (0..k).any(|ky| (0..k).any(|kx| md[bi * h * w + (oy * stride + ky) * w + ox * stride + kx] != T::zero()));
                if any {
                    out[(bi * ho + oy) * wo + ox] = T::one();
                }
            }
        }
    }
    Tensor::from_vec(&[b, 1, ho, wo], out)
}

/// Number of observed cells under each `k×k` footprint (zero padding), `[B, 1, Ho, Wo]`.
fn footprint_counts<T: Real>(mask: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (b, _, h, w) = mask.dims4()?;
    let (Some(ho), Some(wo)) = (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)) else {
        return Err(invalid("sparse_conv2d", format!("kernel {} pad {} on {}x{}", k, pad, h, w)));
    };
    let md = mask.data();
    let mut out = vec![T::zero(); b * ho * wo];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += md[bi * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(bi * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[b, 1, ho, wo], out)
}

/// A graph value paired with its (non-differentiable) observation mask.
#[derive(Clone, Debug)]
pub struct SparseVar<T> {
    pub features: Var,
    pub mask: Tensor<T>,
}

impl<T: Real> Graph<T> {
    pub fn sparse_input(&mut self, m: &MaskedTensor<T>, requires_grad: bool) -> SparseVar<T> {
        let features = if requires_grad {
            self.input(m.features.clone())
        } else {
            self.constant(m.features.clone())
        };
        SparseVar {
            features,
            mask: m.mask.clone(),
        }
    }

    pub fn masked_value(&self, s: &SparseVar<T>) -> MaskedTensor<T> {
        MaskedTensor {
            features: self.value(s.features).clone(),
            mask: s.mask.clone(),
        }
    }

    /// Zeroes features outside `mask` and adopts it as the observation mask.
    pub fn remask(&mut self, s: &SparseVar<T>, mask: &Tensor<T>) -> Result<SparseVar<T>> {
        check_mask_shape(self.value(s.features), mask)?;
        let features = self.mul_const(s.features, mask)?;
        Ok(SparseVar {
            features,
            mask: mask.clone(),
        })
    }

    /// Normalized convolution: the weighted sum of observed inputs divided by
    /// the number of observed inputs under the footprint, plus bias, at sites
    /// whose footprint sees at least one observed input. The output mask is
    /// the max-pool of the input mask over the footprint.
    pub fn sparse_conv2d(&mut self, x: &SparseVar<T>, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<SparseVar<T>> {
        check_mask_shape(self.value(x.features), &x.mask)?;
        let k = self.shape(weight).get(2).copied().unwrap_or(1);
        let masked = self.mul_const(x.features, &x.mask)?;
        let num = self.conv2d(masked, weight, None, stride, pad)?;
        let counts = footprint_counts(&x.mask, k, stride, pad)?;
        let out_mask = counts.map(|c| if c > T::zero() { T::one() } else { T::zero() });
        let eps = T::lit(SPARSE_CONV_EPS);
        let inv = counts.map(|c| if c > T::zero() { T::one() / (c + eps) } else { T::zero() });
        let mut y = self.mul_const(num, &inv)?;
        if let Some(b) = bias {
            let c = self.shape(b)[0];
            let b4 = self.reshape(b, &[1, c, 1, 1])?;
            y = self.add(y, b4)?;
        }
        let features = self.mul_const(y, &out_mask)?;
        Ok(SparseVar { features, mask: out_mask })
    }

    /// Batch normalization whose statistics see observed entries only.
    /// Unobserved entries stay exactly zero; the mask passes through.
    pub fn sparse_batch_norm(
        &mut self,
        x: &SparseVar<T>,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<(SparseVar<T>, Option<BatchStats<T>>)> {
        let (b, c, h, w) = self.value(x.features).dims4()?;
        check_mask_shape(self.value(x.features), &x.mask)?;
        check_affine("sparse_batch_norm", self, c, gamma, beta, running_mean, running_var)?;
        let hw = h * w;
        let md = x.mask.data().to_vec();
        let count: T = md.iter().copied().sum();
        let training = self.is_training();
        if training && count == T::zero() {
            log::warn!("sparse_batch_norm: empty observation, passing input through");
            return Ok((x.clone(), None));
        }
        let xv = self.value(x.features).data();
        let eps = T::lit(eps);
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                let mask = &md[bi * hw..][..hw];
                for ci in 0..c {
                    let f = &xv[(bi * c + ci) * hw..][..hw];
                    mean[ci] += f.iter().zip(mask).map(|(&v, &o)| v * o).sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for bi in 0..b {
                let mask = &md[bi * hw..][..hw];
                for ci in 0..c {
                    let mu = mean[ci];
                    let f = &xv[(bi * c + ci) * hw..][..hw];
                    var[ci] += f.iter().zip(mask).map(|(&v, &o)| o * (v - mu) * (v - mu)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    if md[bi * hw + i] != T::zero() {
                        let xh = (xv[base + i] - mean[ci]) * inv_std[ci];
                        xhat[base + i] = xh;
                        out[base + i] = gv[ci] * xh + bv[ci];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        let stats = training.then(|| BatchStats { mean, var });
        let mask_for_grad = md;
        let features = self.op(value, &[x.features, gamma, beta], move || {
            Box::new(move |ctx, g| {
                let gd = g.data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            if mask_for_grad[bi * hw + i] != T::zero() {
                                dgamma[ci] += gd[base + i] * xhat[base + i];
                                dbeta[ci] += gd[base + i];
                            }
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let k = gamma[ci] * inv_std[ci];
                            for i in 0..hw {
                                if mask_for_grad[bi * hw + i] == T::zero() {
                                    continue;
                                }
                                let j = base + i;
                                gx[j] = if training {
                                    k * (gd[j] - dbeta[ci] / count - xhat[j] * dgamma[ci] / count)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    Tensor::from_vec(&[b, c, h, w], gx).unwrap()
                });
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            })
        });
        Ok((
            SparseVar {
                features,
                mask: x.mask.clone(),
            },
            stats,
        ))
    }

    /// Per-channel mean over observed sites, `[B, C]`. Items with no observed
    /// site pool to zero.
    pub fn sparse_global_pool(&mut self, x: &SparseVar<T>) -> Result<Var> {
        let (b, c, h, w) = self.value(x.features).dims4()?;
        check_mask_shape(self.value(x.features), &x.mask)?;
        let hw = h * w;
        let md = x.mask.data().to_vec();
        let inv: Vec<T> = md
            .chunks(hw)
            .map(|p| {
                let n: T = p.iter().copied().sum();
                if n > T::zero() { T::one() / n } else { T::zero() }
            })
            .collect();
        let xv = self.value(x.features).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let mask = &md[bi * hw..][..hw];
            for ci in 0..c {
                let f = &xv[(bi * c + ci) * hw..][..hw];
                out[bi * c + ci] = f.iter().zip(mask).map(|(&v, &o)| v * o).sum::<T>() * inv[bi];
            }
        }
        let value = Tensor::from_vec(&[b, c], out)?;
        Ok(self.op(value, &[x.features], move || {
            Box::new(move |_, g| {
                let mut gx = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g.data()[bi * c + ci] * inv[bi];
                        let dst = &mut gx[(bi * c + ci) * hw..][..hw];
                        for (d, &o) in dst.iter_mut().zip(&md[bi * hw..][..hw]) {
                            *d = gv * o;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            })
        }))
    }

    /// Mean of observed cells in each `k×k` window; output mask follows
    /// [`mask_downsample`].
    pub fn sparse_avg_pool(&mut self, x: &SparseVar<T>, k: usize, stride: usize) -> Result<SparseVar<T>> {
        let (b, c, h, w) = self.value(x.features).dims4()?;
        check_mask_shape(self.value(x.features), &x.mask)?;
        let out_mask = mask_downsample(&x.mask, k, stride)?;
        let (ho, wo) = (out_mask.shape()[2], out_mask.shape()[3]);
        let counts = footprint_counts(&x.mask, k, stride, 0)?;
        let inv: Vec<T> = counts.data().iter().map(|&n| if n > T::zero() { T::one() / n } else { T::zero() }).collect();
        let md = x.mask.data().to_vec();
        let xv = self.value(x.features).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                let f = &xv[(bi * c + ci) * h * w..][..h * w];
                let m = &md[bi * h * w..][..h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = (oy * stride + ky) * w + ox * stride + kx;
                                acc += f[i] * m[i];
                            }
                        }
                        out[((bi * c + ci) * ho + oy) * wo + ox] = acc * inv[(bi * ho + oy) * wo + ox];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        let features = self.op(value, &[x.features], move || {
            Box::new(move |_, g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let m = &md[bi * h * w..][..h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gd[((bi * c + ci) * ho + oy) * wo + ox] * inv[(bi * ho + oy) * wo + ox];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let i = (oy * stride + ky) * w + ox * stride + kx;
                                        gx[(bi * c + ci) * h * w + i] += gv * m[i];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            })
        });
        Ok(SparseVar { features, mask: out_mask })
    }

    /// Max over observed cells in each `k×k` window; windows without an
    /// observed cell output zero and are unobserved.
    pub fn sparse_max_pool(&mut self, x: &SparseVar<T>, k: usize, stride: usize) -> Result<SparseVar<T>> {
        let (b, c, h, w) = self.value(x.features).dims4()?;
        check_mask_shape(self.value(x.features), &x.mask)?;
        let out_mask = mask_downsample(&x.mask, k, stride)?;
        let (ho, wo) = (out_mask.shape()[2], out_mask.shape()[3]);
        let md = x.mask.data();
        let xv = self.value(x.features).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        let mut arg: Vec<Option<usize>> = vec![None; out.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best: Option<(usize, T)> = None;
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = (oy * stride + ky) * w + ox * stride + kx;
                                if md[bi * h * w + i] == T::zero() {
                                    continue;
                                }
                                let v = xv[base + i];
                                if best.map_or(true, |(_, bv)| v > bv) {
                                    best = Some((base + i, v));
                                }
                            }
                        }
                        let o = ((bi * c + ci) * ho + oy) * wo + ox;
                        if let Some((src, v)) = best {
                            out[o] = v;
                            arg[o] = Some(src);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        let features = self.op(value, &[x.features], move || {
            Box::new(move |_, g| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for (o, src) in arg.iter().enumerate() {
                    if let Some(src) = src {
                        gx[*src] += g.data()[o];
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            })
        });
        Ok(SparseVar { features, mask: out_mask })
    }

    /// Nearest-neighbour enlargement of features and mask alike.
    pub fn sparse_upsample_nearest(&mut self, x: &SparseVar<T>, factor: usize) -> Result<SparseVar<T>> {
        let features = self.upsample(x.features, factor, crate::ops::upsample::UpsampleMode::Nearest)?;
        let mask = crate::ops::upsample::upsample_nearest(&x.mask, factor)?;
        Ok(SparseVar { features, mask })
    }

    /// Leaky ReLU keeps zeros at zero, so the mask is unchanged.
    pub fn sparse_leaky_relu(&mut self, x: &SparseVar<T>, slope: f64) -> SparseVar<T> {
        SparseVar {
            features: self.leaky_relu(x.features, slope),
            mask: x.mask.clone(),
        }
    }

    /// Sum of two masked maps; the result is observed wherever either input is.
    pub fn sparse_add(&mut self, a: &SparseVar<T>, b: &SparseVar<T>) -> Result<SparseVar<T>> {
        let mask = a.mask.zip_map(&b.mask, |x, y| x.max(y))?;
        Ok(SparseVar {
            features: self.add(a.features, b.features)?,
            mask,
        })
    }
}
