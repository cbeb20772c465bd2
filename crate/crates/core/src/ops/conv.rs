//! 2-D convolutions: dense (im2col + GEMM), depthwise, and their composition.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < k {
        return None;
    }
    Some((input + 2 * pad - k) / stride + 1)
}

fn geometry(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    depthwise: bool,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [batch, cin, h, wd] = x[..] else {
        return Err(shape_err(op, format!("input must be BCHW, got {:?}", x)));
    };
    let [cout, wcin, kh, kw] = w[..] else {
        return Err(shape_err(op, format!("weight must be 4-D, got {:?}", w)));
    };
    if kh != kw {
        return Err(shape_err(op, format!("only square kernels supported, got {}x{}", kh, kw)));
    }
    if stride == 0 {
        return Err(invalid(op, "stride must be >= 1"));
    }
    if depthwise {
        if wcin != 1 || cout != cin {
            return Err(shape_err(
                op,
                format!("depthwise weight {:?} needs one 1-channel filter per input channel ({})", w, cin),
            ));
        }
    } else if wcin != cin {
        return Err(shape_err(
            op,
            format!("weight expects {} input channels, input {:?} has {}", wcin, x, cin),
        ));
    }
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(wd, kh, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(shape_err(
            op,
            format!("kernel {} with pad {} does not fit input {}x{}", kh, pad, h, wd),
        )),
    }
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let howo = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*k*k, Ho*Wo]` back into an image `[C, H, W]`, accumulating.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let howo = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let ckk = g.cin * g.k * g.k;
    let howo = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * howo;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * howo] };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(g.cout, ckk, howo, T::one(), w, ckk as isize, 1, src, howo as isize, 1, T::zero(), ob, howo as isize, 1);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(howo).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ckk = g.cin * g.k * g.k;
    let howo = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * howo;
    let mut gx = need_x.then(|| vec![T::zero(); g.batch * in_sz]);
    let mut gw = need_w.then(|| vec![T::zero(); g.cout * ckk]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * howo] };
    let mut gcols = if g.is_pointwise() || !need_x { Vec::new() } else { vec![T::zero(); ckk * howo] };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let gb = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // gw += gout_b · colsᵀ
            T::gemm(g.cout, howo, ckk, T::one(), gb, howo as isize, 1, src, 1, howo as isize, T::one(), gw, ckk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(ckk, g.cout, howo, T::one(), w, 1, ckk as isize, gb, howo as isize, 1, T::zero(), gxb, howo as isize, 1);
            } else {
                T::gemm(ckk, g.cout, howo, T::one(), w, 1, ckk as isize, gb, howo as isize, 1, T::zero(), &mut gcols, howo as isize, 1);
                col2im(&gcols, g, gxb);
            }
        }
    }
    (gx, gw)
}

fn bias_grad<T: Real>(gout: &[T], batch: usize, cout: usize, hw: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); cout];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (b * cout + c) * hw;
            *acc += gout[base..base + hw].iter().copied().sum::<T>();
        }
    }
    gb
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let mut out = vec![T::zero(); g.batch * g.cin * g.ho * g.wo];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let ker = &w[c * k * k..(c + 1) * k * k];
            let o = &mut out[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            let bv = bias.map_or(T::zero(), |bb| bb[c]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bv;
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * g.w..][..g.w];
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += row[ix as usize] * ker[ky * k + kx];
                            }
                        }
                    }
                    o[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let off = (b * g.cin + c) * g.h * g.w;
            let plane = &x[off..off + g.h * g.w];
            let ker = &w[c * k * k..(c + 1) * k * k];
            let go = &gout[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = go[oy * g.wo + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let idx = iy as usize * g.w + ix as usize;
                            if let Some(gx) = gx.as_mut() {
                                gx[off + idx] += gv * ker[ky * k + kx];
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[c * k * k + ky * k + kx] += gv * plane[idx];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl<T: Real> Graph<T> {
    /// Dense convolution, `weight: [Cout, Cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, weight, bias, stride, pad, false)
    }

    /// One `k×k` filter per channel, `weight: [C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, weight, bias, stride, pad, true)
    }

    /// Depthwise `k×k` convolution followed by a pointwise `1×1` convolution.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = self.depthwise_conv2d(x, depthwise, None, stride, pad)?;
        self.conv2d(d, pointwise, bias, 1, 0)
    }

    fn conv_impl(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let name = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let g = geometry(name, self.shape(x), self.shape(weight), depthwise, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.cout] {
                return Err(shape_err(name, format!("bias {:?} for {} output channels", self.shape(b), g.cout)));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(weight).data());
        let bv = bias.map(|b| self.value(b).data());
        let out = if depthwise {
            depthwise_forward(xv, wv, bv, &g)
        } else {
            conv_forward(xv, wv, bv, &g)
        };
        let value = Tensor::from_vec(&[g.batch, g.cout, g.ho, g.wo], out)?;
        let parents: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.op(value, &parents, move || {
            Box::new(move |ctx, gout| {
                let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let (gx, gw) = if depthwise {
                    depthwise_backward(xv, wv, gout.data(), &g, ctx.needs[0], ctx.needs[1])
                } else {
                    conv_backward(xv, wv, gout.data(), &g, ctx.needs[0], ctx.needs[1])
                };
                let mut res = vec![
                    gx.map(|d| Tensor::from_vec(ctx.inputs[0].shape(), d).unwrap()),
                    gw.map(|d| Tensor::from_vec(ctx.inputs[1].shape(), d).unwrap()),
                ];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        Tensor::from_vec(&[g.cout], bias_grad(gout.data(), g.batch, g.cout, g.ho * g.wo)).unwrap()
                    }));
                }
                res
            })
        }))
    }
}

/// Plain-loop convolution used as a test oracle.
pub fn conv2d_reference<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = geometry("conv2d_reference", x.shape(), w.shape(), false, stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.ho, g.wo]);
    for b in 0..g.batch {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.map_or(T::zero(), |bb| bb.data()[co]);
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x.at4(b, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.set4(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}
