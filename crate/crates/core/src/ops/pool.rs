use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::ops::conv::out_extent;
use crate::tensor::{Real, Tensor};

fn pool_dims(op: &'static str, shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let [b, c, h, w] = shape[..] else {
        return Err(invalid(op, format!("input must be BCHW, got {:?}", shape)));
    };
    if k == 0 || stride == 0 {
        return Err(invalid(op, "window and stride must be >= 1"));
    }
    if k > h || k > w {
        return Err(invalid(op, format!("window {} larger than {}x{}", k, h, w)));
    }
    let ho = out_extent(h, k, stride, 0).unwrap();
    let wo = out_extent(w, k, stride, 0).unwrap();
    Ok((b, c, h, w, ho, wo))
}

impl<T: Real> Graph<T> {
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w, ho, wo) = pool_dims("max_pool2d", self.shape(x), k, stride)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + bi;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        let in_shape = [b, c, h, w];
        Ok(self.op(value, &[x], move || {
            Box::new(move |_, g| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).unwrap())]
            })
        }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w, ho, wo) = pool_dims("avg_pool2d", self.shape(x), k, stride)?;
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        acc += src[row..row + k].iter().copied().sum::<T>();
                    }
                    out[(plane * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        let in_shape = [b, c, h, w];
        Ok(self.op(value, &[x], move || {
            Box::new(move |_, g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gd[(plane * ho + oy) * wo + ox] * inv;
                            for ky in 0..k {
                                let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                                gx[row..row + k].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).unwrap())]
            })
        }))
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` mean over space.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let out: Vec<T> = xv.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[b, c, 1, 1], out)?;
        Ok(self.op(value, &[x], move || {
            Box::new(move |_, g| {
                let mut gx = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            })
        }))
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` max over space.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        let mut arg = Vec::with_capacity(b * c);
        for (pi, p) in xv.chunks(hw).enumerate() {
            let (mut bi, mut best) = (0, T::neg_infinity());
            for (i, &v) in p.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out.push(best);
            arg.push(pi * hw + bi);
        }
        let value = Tensor::from_vec(&[b, c, 1, 1], out)?;
        Ok(self.op(value, &[x], move || {
            Box::new(move |_, g| {
                let mut gx = vec![T::zero(); b * c * hw];
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            })
        }))
    }
}
