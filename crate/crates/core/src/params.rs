//! Named parameter and buffer storage shared by every model.
//!
//! Layers hold [`ParamId`]s, never tensors, so one model definition can be
//! instantiated at either precision and serialized without reflection.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result, TensorError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other non-gradient state.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

impl<T: Real> Param<T> {
    pub fn requires_grad(&self) -> bool {
        self.kind == ParamKind::Trainable
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            kind,
        });
        id
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies every value into a store of another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values by name from `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let id = other.lookup(&p.name).ok_or_else(|| {
                TensorError::Checkpoint(format!("missing parameter `{}`", p.name))
            })?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(invalid(
                    "load_from",
                    format!(
                        "`{}` has shape {:?}, checkpoint has {:?}",
                        p.name,
                        p.value.shape(),
                        src.shape()
                    ),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Fan-in scaled normal init for Leaky-ReLU networks (He et al.).
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, slope: f64, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), used for fully connected layers.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}
