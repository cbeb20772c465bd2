//! AdamW, SGD with Nesterov momentum, and the warm-up + step-decay schedule.

use crate::error::{invalid, Result, TensorError};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    SgdNesterov { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_nesterov(momentum: f64) -> Self {
        OptimizerKind::SgdNesterov { momentum }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
enum Slot<T> {
    Empty,
    Adam { m: Tensor<T>, v: Tensor<T> },
    Momentum { buf: Tensor<T> },
}

/// Optimizer state: one moment slot per store entry, plus the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    slots: Vec<Slot<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter holding a gradient, then
    /// clears the gradients. A non-finite gradient rejects the whole step
    /// before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("optimizer_step", format!("learning rate must be positive, got {lr}")));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(TensorError::NonFiniteGradient { name: p.name.clone() });
                }
            }
        }
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), Slot::Empty);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let wd = T::lit(self.config.weight_decay);
        let lr_t = T::lit(lr);
        for (slot, p) in self.slots.iter_mut().zip(store.iter_mut()) {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            match self.config.kind {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    if !matches!(slot, Slot::Adam { .. }) {
                        *slot = Slot::Adam {
                            m: Tensor::zeros(grad.shape()),
                            v: Tensor::zeros(grad.shape()),
                        };
                    }
                    let Slot::Adam { m, v } = slot else { unreachable!() };
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::one() - T::lit(beta1.powi(t));
                    let c2 = T::one() - T::lit(beta2.powi(t));
                    let eps = T::lit(eps);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        md[i] = b1 * md[i] + (T::one() - b1) * gi;
                        vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                        let mhat = md[i] / c1;
                        let vhat = vd[i] / c2;
                        // decoupled decay: added to the update, never to the gradient
                        *w -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    }
                }
                OptimizerKind::SgdNesterov { momentum } => {
                    if !matches!(slot, Slot::Momentum { .. }) {
                        *slot = Slot::Momentum {
                            buf: Tensor::zeros(grad.shape()),
                        };
                    }
                    let Slot::Momentum { buf } = slot else { unreachable!() };
                    let mu = T::lit(momentum);
                    for ((w, &gi), b) in p.value.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                        let g = gi + wd * *w;
                        *b = mu * *b + g;
                        *w -= lr_t * (g + mu * *b);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `floor` to `peak`, then division by `decay_factor`
/// every `decay_every` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub floor: f64,
    pub peak: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            floor: lr,
            peak: lr,
            warmup_epochs: 0,
            decay_factor: 1.0,
            decay_every: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.peak > 0.0) {
            return Err(invalid("lr_schedule", "rates must be positive"));
        }
        if self.warmup_epochs > 0 && self.floor >= self.peak {
            return Err(invalid("lr_schedule", "warm-up floor must be below the peak"));
        }
        if self.decay_factor < 1.0 || self.decay_every == 0 {
            return Err(invalid("lr_schedule", "decay factor must be >= 1 and interval >= 1"));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        let warm_steps = self.warmup_epochs * steps_per_epoch.max(1);
        let step = epoch * steps_per_epoch.max(1) + step_in_epoch;
        if step < warm_steps {
            return self.floor + (self.peak - self.floor) * step as f64 / warm_steps as f64;
        }
        self.peak / self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}
