//! Elementwise arithmetic with broadcasting, reductions, reshaping and concatenation.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Output shape and per-operand strides for a same-rank broadcast (rank ≤ 4).
struct Broadcast {
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut s = [1; 4];
    let off = 4 - shape.len();
    s[off..].copy_from_slice(shape);
    s
}

fn strides(shape: &[usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        st[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    st
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a.len() != b.len() || a.len() > 4 {
        return Err(shape_err(op, format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = [1; 4];
    for d in 0..4 {
        out[d] = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    op,
                    format!("cannot broadcast {:?} with {:?}", a, b),
                ))
            }
        };
    }
    let shape = a.iter().zip(b).map(|(&x, &y)| x.max(y)).collect();
    Ok((
        shape,
        Broadcast {
            out,
            sa: strides(&pa),
            sb: strides(&pb),
        },
    ))
}

impl Broadcast {
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [n0, n1, n2, n3] = self.out;
        let mut o = 0;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let ba = i0 * self.sa[0] + i1 * self.sa[1] + i2 * self.sa[2];
                    let bb = i0 * self.sb[0] + i1 * self.sb[1] + i2 * self.sb[2];
                    for i3 in 0..n3 {
                        f(o, ba + i3 * self.sa[3], bb + i3 * self.sb[3]);
                        o += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, kind: BinOp) -> Result<Var> {
        let name = match kind {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        };
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bc.out.iter().product()];
        match kind {
            BinOp::Add => bc.for_each(|o, ia, ib| out[o] = va[ia] + vb[ib]),
            BinOp::Sub => bc.for_each(|o, ia, ib| out[o] = va[ia] - vb[ib]),
            BinOp::Mul => bc.for_each(|o, ia, ib| out[o] = va[ia] * vb[ib]),
        }
        let value = Tensor::from_vec(&shape, out)?;
        let shape_a = self.shape(a).to_vec();
        let shape_b = self.shape(b).to_vec();
        Ok(self.op(value, &[a, b], move || {
            Box::new(move |ctx, g| {
                let gd = g.data();
                let mut ga = ctx.needs[0].then(|| vec![T::zero(); shape_a.iter().product()]);
                let mut gb = ctx.needs[1].then(|| vec![T::zero(); shape_b.iter().product()]);
                let (va, vb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                bc.for_each(|o, ia, ib| {
                    let (da, db) = match kind {
                        BinOp::Add => (gd[o], gd[o]),
                        BinOp::Sub => (gd[o], -gd[o]),
                        BinOp::Mul => (gd[o] * vb[ib], gd[o] * va[ia]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                vec![
                    ga.map(|d| Tensor::from_vec(&shape_a, d).unwrap()),
                    gb.map(|d| Tensor::from_vec(&shape_b, d).unwrap()),
                ]
            })
        }))
    }

    /// Elementwise `a + b` with size-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    /// Multiplies by a tensor that is not part of the differentiable graph.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let cv = self.constant(c.clone());
        self.mul(a, cv)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        self.op(value, &[x], move || {
            Box::new(move |_, g| vec![Some(g.scale(scale))])
        })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.op(value, &[x], move || {
            Box::new(move |_, g| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.op(value, &[x], move || {
            Box::new(move |_, g| vec![Some(g.clone().reshape(&old).unwrap())])
        }))
    }

    /// `[B, C, H, W] -> [B, C*H*W]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(invalid("flatten", "scalar input"));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat_channels", "no inputs"));
        }
        let (b, _, h, w) = self.value(xs[0]).dims4()?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (bx, cx, hx, wx) = self.value(x).dims4()?;
            if (bx, hx, wx) != (b, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(x), self.shape(xs[0])),
                ));
            }
            chans.push(cx);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&chans) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[b, ctot, h, w], out)?;
        Ok(self.op(value, xs, move || {
            Box::new(move |ctx, g| {
                let mut start = 0;
                chans
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let r = ctx.needs[i].then(|| g.narrow_channels(start, c).unwrap());
                        start += c;
                        r
                    })
                    .collect()
            })
        }))
    }

    /// Concatenates 2-D `[B, F_i]` tensors along the feature axis.
    pub fn concat_features(&mut self, xs: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x).to_vec();
            if s.len() != 2 {
                return Err(shape_err("concat_features", format!("expected 2-D, got {:?}", s)));
            }
            reshaped.push(self.reshape(x, &[s[0], s[1], 1, 1])?);
        }
        let cat = self.concat_channels(&reshaped)?;
        let s = self.shape(cat).to_vec();
        self.reshape(cat, &[s[0], s[1]])
    }
}
