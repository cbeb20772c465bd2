//! Crosswise sparsification of the foreground candidates.

use gigaslide_core::{Real, Result, Tensor};

/// Lower and upper clamp of the running sparsity rate.
pub const RHO_MIN: f64 = 0.01;
pub const RHO_MAX: f64 = 0.99;

/// Number of sites out of `sites` activated at rate `rho` when all scores
/// are distinct and positive.
pub fn activated_count(sites: usize, rho: f64) -> usize {
    let k = ((1.0 - rho) * sites as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(sites)
}

/// Per-site score, the largest absolute candidate over channels: `[B·H·W]`
/// in batch-major order.
pub fn site_scores<T: Real>(candidates: &Tensor<T>) -> Result<Vec<T>> {
    let (b, c, h, w) = candidates.dims4()?;
    let hw = h * w;
    let d = candidates.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for i in 0..hw {
            let s = (0..c).map(|ci| d[(bi * c + ci) * hw + i].abs()).fold(T::zero(), |a, v| if v > a { v } else { a });
            out.push(s);
        }
    }
    Ok(out)
}

/// Score that a site must strictly exceed so that the top
/// `activated_count(n, rho)` of `scores` are active; never below zero, so
/// all-zero candidates activate nothing. `None` activates nothing either.
pub fn quantile_cut<T: Real>(scores: &[T], rho: f64) -> Option<T> {
    let n = scores.len();
    let k = activated_count(n, rho);
    if k == 0 {
        return None;
    }
    if k >= n {
        return Some(T::zero());
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Some(if sorted[k] > T::zero() { sorted[k] } else { T::zero() })
}

/// Mask `[B, 1, H, W]` of sites whose score strictly exceeds `cut`.
pub fn threshold_mask<T: Real>(candidates: &Tensor<T>, cut: Option<T>) -> Result<Tensor<T>> {
    let (b, _, h, w) = candidates.dims4()?;
    let scores = site_scores(candidates)?;
    let mask = scores
        .iter()
        .map(|&s| match cut {
            Some(t) if s > t => T::one(),
            _ => T::zero(),
        })
        .collect();
    Tensor::from_vec(&[b, 1, h, w], mask)
}

/// Binary mask thresholding the site scores at the `rho` quantile taken
/// over every site of the batch, and the cut used. Ties at the cut are
/// excluded.
pub fn crosswise_mask<T: Real>(candidates: &Tensor<T>, rho: f64) -> Result<(Tensor<T>, Option<T>)> {
    let cut = quantile_cut(&site_scores(candidates)?, rho);
    Ok((threshold_mask(candidates, cut)?, cut))
}

/// Running-average update of the sparsity rate, clamped to `[RHO_MIN, RHO_MAX]`.
pub fn update_sparsity_rate(rho: f64, batch_activation_rate: f64, momentum: f64) -> f64 {
    (momentum * rho + (1.0 - momentum) * (1.0 - batch_activation_rate)).clamp(RHO_MIN, RHO_MAX)
}
