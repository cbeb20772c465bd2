//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values live in
//! the graph; [`Var`] is a cheap handle. Calling [`Graph::backward`] on a
//! scalar walks the tape in reverse and returns a [`Gradients`] table.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs visible to a backward rule.
pub struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; rules
    /// may return `None` for such inputs and skip the work.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> =
    Box<dyn Fn(&BackCtx<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    training: bool,
    track_grad: bool,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Graph<T> {
    /// Training mode: gradients tracked, normalization uses batch statistics.
    pub fn train() -> Self {
        Self::with_mode(true, true)
    }

    /// Inference without gradient bookkeeping.
    pub fn eval() -> Self {
        Self::with_mode(false, false)
    }

    /// Inference-mode layers, but gradients are still recorded (Grad-CAM, grad checks).
    pub fn eval_with_grad() -> Self {
        Self::with_mode(false, true)
    }

    pub fn with_mode(training: bool, track_grad: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            training,
            track_grad,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn tracks_grad(&self) -> bool {
        self.track_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.track_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf the caller wants the gradient of.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a stored parameter into this graph; repeated binds return the same `Var`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_leaf(p.value.clone(), p.kind == ParamKind::Trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Records an operation. `backward` receives the upstream gradient and must
    /// return one entry per parent.
    pub fn custom_op(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.track_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Like [`custom_op`](Self::custom_op) but only builds the closure when needed.
    pub(crate) fn op<F>(&mut self, value: Tensor<T>, parents: &[Var], make: F) -> Var
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let requires_grad = self.track_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(make()) } else { None };
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn queue_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Writes running statistics gathered during a training forward pass.
    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore<T>) {
        for (id, value) in self.buffer_updates.drain(..) {
            store.get_mut(id).value = value;
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output);
        if self.value(output).numel() != 1 {
            return Err(TensorError::NonScalarOutput(shape.to_vec()));
        }
        self.backward_seeded(output, Tensor::ones(shape))
    }

    /// Reverse pass with an explicit seed gradient for `output`.
    pub fn backward_seeded(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradient table produced by a reverse pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves parameter gradients into the store (accumulating if present).
    pub fn write_to_store(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (&id, &var) in &graph.bound {
            let Some(g) = self.get(var) else { continue };
            let p = store.get_mut(id);
            if p.kind != ParamKind::Trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}
