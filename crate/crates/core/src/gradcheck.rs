//! Central-difference gradient verification.

use crate::error::{invalid, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input or parameter index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn record(&mut self, which: usize, idx: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = (which, idx);
        }
    }
}

/// Which elements of a tensor of `n` elements to probe: all of them, or an
/// evenly strided subset of at most `limit`.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => {
            let step = n as f64 / l as f64;
            (0..l).map(|i| ((i as f64 + 0.5) * step) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarOutput(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences.
///
/// `f` builds a scalar from the input vars and must be deterministic.
/// Inference-mode graphs are used so normalization layers are stateless.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], limit: Option<usize>, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs_in_mode(inputs, false, &|_, n| probe_indices(n, limit), &mut f)
}

/// As [`check_inputs`] but with batch statistics (training-mode normalization).
pub fn check_inputs_training<F>(inputs: &[Tensor<f64>], limit: Option<usize>, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs_in_mode(inputs, true, &|_, n| probe_indices(n, limit), &mut f)
}

/// Probes only the elements accepted by `select(input, element)`; used where
/// some elements sit exactly on a kink (e.g. unobserved zeros feeding a
/// Leaky ReLU) and a one-sided derivative is meaningless.
pub fn check_inputs_where<F, S>(inputs: &[Tensor<f64>], training: bool, select: S, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> bool,
{
    check_inputs_in_mode(inputs, training, &|which, n| (0..n).filter(|&i| select(which, i)).collect(), &mut f)
}

fn check_inputs_in_mode<F>(
    inputs: &[Tensor<f64>],
    training: bool,
    probes: &dyn Fn(usize, usize) -> Vec<usize>,
    f: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(invalid("grad_check", "no inputs"));
    }
    let mut g = Graph::with_mode(training, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_mode(training, false);
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    for (which, a) in analytic.iter().enumerate() {
        for idx in probes(which, a.numel()) {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + FD_STEP;
            let up = eval(&work)?;
            work[which].data_mut()[idx] = orig - FD_STEP;
            let down = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            report.record(which, idx, a.data()[idx], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Gradient check over stored parameters. `f` builds the scalar loss from
/// the store; `ids` select the parameters to probe.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    limit: Option<usize>,
    training: bool,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::with_mode(training, true);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            g.bound_param(id)
                .and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (which, (&id, a)) in ids.iter().zip(&analytic).enumerate() {
        for idx in probe_indices(a.numel(), limit) {
            let orig = store.value(id).data()[idx];
            let mut probe = |delta: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).value.data_mut()[idx] = orig + delta;
                let mut g = Graph::with_mode(training, false);
                let out = f(&mut g, store)?;
                scalar_of(&g, out)
            };
            let up = probe(FD_STEP, store);
            let down = probe(-FD_STEP, store);
            store.get_mut(id).value.data_mut()[idx] = orig;
            report.record(which, idx, a.data()[idx], (up? - down?) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}
