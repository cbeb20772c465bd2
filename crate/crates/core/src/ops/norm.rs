use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch statistics computed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `momentum * running + (1 - momentum) * batch`.
    pub fn blend_into(&self, running_mean: &Tensor<T>, running_var: &Tensor<T>, momentum: f64) -> (Tensor<T>, Tensor<T>) {
        let m = T::lit(momentum);
        let blend = |run: &Tensor<T>, batch: &[T]| {
            Tensor::from_fn(run.shape(), |i| m * run.data()[i] + (T::one() - m) * batch[i])
        };
        (blend(running_mean, &self.mean), blend(running_var, &self.var))
    }
}

pub(crate) fn check_affine<T: Real>(op: &'static str, g: &Graph<T>, c: usize, gamma: Var, beta: Var, rm: &Tensor<T>, rv: &Tensor<T>) -> Result<()> {
    for (what, s) in [("gamma", g.shape(gamma)), ("beta", g.shape(beta)), ("running mean", rm.shape()), ("running var", rv.shape())] {
        if s != [c] {
            return Err(shape_err(op, format!("{} has shape {:?}, expected [{}]", what, s, c)));
        }
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// Dense batch normalization over (batch, height, width) per channel.
    ///
    /// Returns the batch statistics when the graph is in training mode; the
    /// caller decides how to fold them into the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if b * h * w == 0 {
            return Err(invalid("batch_norm", "zero-size batch"));
        }
        check_affine("batch_norm", self, c, gamma, beta, running_mean, running_var)?;
        let training = self.is_training();
        let n = b * h * w;
        let hw = h * w;
        let nt = T::from_usize(n).unwrap();
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    mean[ci] += xv[(bi * c + ci) * hw..][..hw].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= nt);
            for bi in 0..b {
                for ci in 0..c {
                    let m = mean[ci];
                    var[ci] += xv[(bi * c + ci) * hw..][..hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= nt);
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
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        let stats = training.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.op(value, &[x, gamma, beta], move || {
            Box::new(move |ctx, g| {
                let gd = g.data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in base..base + hw {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let k = gamma[ci] * inv_std[ci];
                            for i in base..base + hw {
                                gx[i] = if training {
                                    k * (gd[i] - dbeta[ci] / nt - xhat[i] * dgamma[ci] / nt)
                                } else {
                                    k * gd[i]
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
        Ok((v, stats))
    }
}
