//! Parameterized layers. Each layer owns [`ParamId`]s into a [`ParamStore`]
//! and is generic over the precision only at call time.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::activation::LEAKY_SLOPE;
use crate::ops::norm::{BN_EPS, BN_MOMENTUM};
use crate::params::{fan_in_uniform, he_normal, ParamId, ParamStore};
use crate::sparse::SparseVar;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.trainable(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], cin * k * k, LEAKY_SLOPE, rng),
        );
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// Stride 1 with padding that preserves the spatial extent (odd `k`).
    pub fn same<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, k, 1, k / 2, true, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn forward_sparse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>) -> Result<SparseVar<T>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.sparse_conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn zero_init<T: Real>(&self, store: &mut ParamStore<T>) {
        let p = store.get_mut(self.weight);
        p.value = Tensor::zeros(p.value.shape());
        if let Some(b) = self.bias {
            let p = store.get_mut(b);
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

/// Depthwise `k×k` then pointwise `1×1`.
#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl SeparableConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let depthwise = store.trainable(
            format!("{name}.depthwise"),
            he_normal(&[cin, 1, k, k], k * k, LEAKY_SLOPE, rng),
        );
        let pointwise = store.trainable(
            format!("{name}.pointwise"),
            he_normal(&[cout, cin, 1, 1], cin, LEAKY_SLOPE, rng),
        );
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), Tensor::zeros(&[cout])));
        SeparableConv2d {
            depthwise,
            pointwise,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// Trainable scalars: `cin·k² + cin·cout (+ cout)`.
    pub fn param_count(&self) -> usize {
        self.cin * self.k * self.k + self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.param(store, self.depthwise);
        let p = g.param(store, self.pointwise);
        let b = self.bias.map(|b| g.param(store, b));
        g.separable_conv2d(x, d, p, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    fn queue<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stats: Option<crate::ops::norm::BatchStats<T>>) {
        if let Some(stats) = stats {
            let (m, v) = stats.blend_into(store.value(self.running_mean), store.value(self.running_var), BN_MOMENTUM);
            g.queue_buffer_update(self.running_mean, m);
            g.queue_buffer_update(self.running_var, v);
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = g.batch_norm(
            x,
            gamma,
            beta,
            store.value(self.running_mean),
            store.value(self.running_var),
            BN_EPS,
        )?;
        self.queue(g, store, stats);
        Ok(y)
    }

    pub fn forward_sparse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &SparseVar<T>) -> Result<SparseVar<T>> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = g.sparse_batch_norm(
            x,
            gamma,
            beta,
            store.value(self.running_mean),
            store.value(self.running_var),
            BN_EPS,
        )?;
        self.queue(g, store, stats);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.trainable(format!("{name}.weight"), fan_in_uniform(&[fout, fin], fin, rng)),
            bias: store.trainable(format!("{name}.bias"), Tensor::zeros(&[fout])),
            fin,
            fout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
