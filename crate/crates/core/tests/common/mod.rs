#![allow(dead_code)]

use gigaslide_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

/// Binary mask `[b, 1, h, w]` with observation probability `p`.
pub fn random_mask(b: usize, h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[b, 1, h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Guarantees every batch item has at least one observed site.
pub fn nonempty_mask(b: usize, h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut m = random_mask(b, h, w, p, rng);
    for bi in 0..b {
        if m.data()[bi * h * w..(bi + 1) * h * w].iter().all(|&v| v == 0.0) {
            let i = rng.gen_range(0..h * w);
            m.data_mut()[bi * h * w + i] = 1.0;
        }
    }
    m
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(g.shape(x), 0.5, 1.5, &mut r);
    let p = g.mul_const(x, &w)?;
    Ok(g.sum_all(p))
}
