use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Negative slope used wherever a Leaky ReLU appears.
pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.op(value, &[x], move || {
            Box::new(move |ctx, g| {
                let xin = ctx.inputs[0];
                vec![Some(g.zip_map(xin, |gv, xv| if xv > T::zero() { gv } else { gv * s }).unwrap())]
            })
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.op(value, &[x], || {
            Box::new(|ctx, g| {
                let y = ctx.output;
                vec![Some(g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)).unwrap())]
            })
        })
    }

    /// `x · Wᵀ + b` with `x: [B, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("input {:?} incompatible with weight {:?}", xs, ws),
            ));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), fout),
                ));
            }
        }
        let mut out = vec![T::zero(); batch * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            batch,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            beta,
            &mut out,
            fout as isize,
            1,
        );
        let value = Tensor::from_vec(&[batch, fout], out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.op(value, &parents, move || {
            Box::new(move |ctx, g| {
                let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gd = g.data();
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); batch * fin];
                    // gx = g · W
                    T::gemm(batch, fout, fin, T::one(), gd, fout as isize, 1, wv, fin as isize, 1, T::zero(), &mut d, fin as isize, 1);
                    Tensor::from_vec(&[batch, fin], d).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    // gw = gᵀ · x
                    T::gemm(fout, batch, fin, T::one(), gd, 1, fout as isize, xv, fin as isize, 1, T::zero(), &mut d, fin as isize, 1);
                    Tensor::from_vec(&[fout, fin], d).unwrap()
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut d = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::from_vec(&[fout], d).unwrap()
                    }));
                }
                res
            })
        }))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?} for {} labels", s, labels.len()),
            ));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); batch * k];
        let mut loss = T::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * k..(bi + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let logz = z.ln() + m;
            loss += logz - row[label];
            for j in 0..k {
                probs[bi * k + j] = (row[j] - logz).exp();
            }
        }
        let nb = T::from_usize(batch).unwrap();
        let value = Tensor::scalar(loss / nb);
        let labels = labels.to_vec();
        Ok(self.op(value, &[logits], move || {
            Box::new(move |_, g| {
                let scale = g.item() / nb;
                let mut d = probs.clone();
                for (bi, &label) in labels.iter().enumerate() {
                    d[bi * k + label] -= T::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![Some(Tensor::from_vec(&[batch, k], d).unwrap())]
            })
        }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }
}

/// Row-wise softmax of a `[B, K]` tensor (no graph).
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    sigmoid(x)
}
