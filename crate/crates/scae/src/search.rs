//! Search for the sparsity rate with the lowest validation error.

use crate::error::{Result, ScaeError};

#[derive(Clone, Debug, PartialEq)]
pub struct RhoSearch {
    pub best: f64,
    pub best_mse: f64,
    /// Every probe in evaluation order.
    pub probes: Vec<(f64, f64)>,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Bracketing search over `[lo, hi]` using at most `max_probes` evaluations
/// of `probe(rho) -> validation mse`. Each step keeps the half of the bracket
/// around the better interior probe. Returns the best probe seen.
pub fn search_sparsity_rate<F>(range: (f64, f64), max_probes: usize, mut probe: F) -> Result<RhoSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = range;
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) || max_probes == 0 {
        return Err(ScaeError::Invalid(format!("bad search range {range:?} or probe budget {max_probes}")));
    }
    let mut probes = Vec::new();
    let mut eval = |rho: f64, probes: &mut Vec<(f64, f64)>| -> Result<f64> {
        let mse = probe(rho)?;
        log::info!("sparsity search probe {}: rho {rho:.4} -> mse {mse:.6}", probes.len() + 1);
        probes.push((rho, mse));
        Ok(mse)
    };
    if lo == hi || max_probes == 1 {
        let rho = 0.5 * (lo + hi);
        let mse = eval(rho, &mut probes)?;
        return Ok(RhoSearch {
            best: rho,
            best_mse: mse,
            probes,
        });
    }
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = eval(a, &mut probes)?;
    let mut fb = eval(b, &mut probes)?;
    while probes.len() < max_probes {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = eval(a, &mut probes)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = eval(b, &mut probes)?;
        }
    }
    let &(best, best_mse) = probes
        .iter()
        .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one probe");
    if probes.iter().all(|p| p.1 == best_mse) {
        log::warn!("sparsity search: flat landscape, keeping rho {best:.4}");
    }
    Ok(RhoSearch { best, best_mse, probes })
}
