use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers, no corner alignment, edge clamping.
    Bilinear,
}

/// For each output coordinate: (lower source index, upper source index, weight of upper).
fn bilinear_table(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = input * factor;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample", "factor must be >= 1"));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        match mode {
            UpsampleMode::Nearest => {
                let mut out = vec![T::zero(); b * c * ho * wo];
                for plane in 0..b * c {
                    let src = &xv[plane * h * w..][..h * w];
                    let dst = &mut out[plane * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let srow = &src[(oy / factor) * w..][..w];
                        for (ox, d) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                            *d = srow[ox / factor];
                        }
                    }
                }
                let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
                Ok(self.op(value, &[x], move || {
                    Box::new(move |_, g| {
                        let gd = g.data();
                        let mut gx = vec![T::zero(); b * c * h * w];
                        for plane in 0..b * c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    gx[plane * h * w + (oy / factor) * w + ox / factor] +=
                                        gd[plane * ho * wo + oy * wo + ox];
                                }
                            }
                        }
                        vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
                    })
                }))
            }
            UpsampleMode::Bilinear => {
                let ty = bilinear_table(h, factor);
                let tx = bilinear_table(w, factor);
                let mut out = vec![T::zero(); b * c * ho * wo];
                for plane in 0..b * c {
                    let src = &xv[plane * h * w..][..h * w];
                    let dst = &mut out[plane * ho * wo..][..ho * wo];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                            dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                        }
                    }
                }
                let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
                Ok(self.op(value, &[x], move || {
                    Box::new(move |_, g| {
                        let gd = g.data();
                        let mut gx = vec![T::zero(); b * c * h * w];
                        for plane in 0..b * c {
                            let dst = &mut gx[plane * h * w..][..h * w];
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                let fy = T::lit(fy);
                                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                    let fx = T::lit(fx);
                                    let gv = gd[plane * ho * wo + oy * wo + ox];
                                    let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                                    dst[y0 * w + x0] += gt * (T::one() - fx);
                                    dst[y0 * w + x1] += gt * fx;
                                    dst[y1 * w + x0] += gb * (T::one() - fx);
                                    dst[y1 * w + x1] += gb * fx;
                                }
                            }
                        }
                        vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
                    })
                }))
            }
        }
    }
}

/// Nearest-neighbour enlargement of a plain tensor (no graph).
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut g = Graph::eval();
    let v = g.constant(x.clone());
    let out = g.upsample(v, factor, UpsampleMode::Nearest)?;
    Ok(g.value(out).clone())
}

/// Bilinear enlargement of a plain tensor (no graph).
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut g = Graph::eval();
    let v = g.constant(x.clone());
    let out = g.upsample(v, factor, UpsampleMode::Bilinear)?;
    Ok(g.value(out).clone())
}
