//! Reconstruction training and validation.

use gigaslide_core::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use gigaslide_core::{Graph, ParamStore, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaeError};
use crate::mask::update_sparsity_rate;
use crate::model::Scae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaeTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ScaeTrainConfig {
    fn default() -> Self {
        ScaeTrainConfig {
            lr: 0.03,
            momentum: 0.8,
            weight_decay: 1e-5,
            batch: 8,
            epochs: 6,
            seed: 0,
        }
    }
}

/// Channel means below this fraction of full scale mark a nucleus-rich patch.
pub const RICH_INTENSITY: f64 = 0.7;
pub const RICH_SHARE: f64 = 0.9;

pub fn is_nucleus_rich(patch: &RgbImage) -> bool {
    let n = (patch.width() * patch.height()) as f64;
    let mut sums = [0f64; 3];
    for p in patch.pixels() {
        for c in 0..3 {
            sums[c] += p[c] as f64;
        }
    }
    sums.iter().all(|&s| s / n < RICH_INTENSITY * 255.0)
}

/// Draws `n` patches with replacement-free sampling inside each pool: a
/// `RICH_SHARE` fraction from nucleus-rich candidates, the rest from the
/// others. Falls back to whichever pool is non-empty.
pub fn sample_training_patches<R: Rng + ?Sized>(candidates: Vec<RgbImage>, n: usize, rng: &mut R) -> Vec<RgbImage> {
    let (mut rich, mut other): (Vec<_>, Vec<_>) = candidates.into_iter().partition(is_nucleus_rich);
    rich.shuffle(rng);
    other.shuffle(rng);
    let want_rich = ((n as f64 * RICH_SHARE).ceil() as usize).min(n);
    let take_rich = want_rich.min(rich.len()).max(n.saturating_sub(other.len())).min(rich.len());
    let take_other = (n - take_rich).min(other.len());
    let mut out: Vec<RgbImage> = rich.into_iter().take(take_rich).chain(other.into_iter().take(take_other)).collect();
    out.shuffle(rng);
    out
}

/// Network input (`2·x/255 − 1`) and reconstruction target (`x/255`).
pub fn patches_to_tensors(patches: &[&RgbImage], side: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let plane = side * side;
    let mut target = vec![0f32; patches.len() * 3 * plane];
    for (b, p) in patches.iter().enumerate() {
        if p.width() as usize != side || p.height() as usize != side {
            return Err(ScaeError::PatchExtent {
                expected: side as u32,
                width: p.width(),
                height: p.height(),
            });
        }
        for (i, px) in p.pixels().enumerate() {
            for c in 0..3 {
                target[(b * 3 + c) * plane + i] = px[c] as f32 / 255.0;
            }
        }
    }
    let shape = [patches.len(), 3, side, side];
    let input = target.iter().map(|&v| 2.0 * v - 1.0).collect();
    Ok((Tensor::from_vec(&shape, input)?, Tensor::from_vec(&shape, target)?))
}

/// One training batch as seen by an observer.
pub struct BatchObservation<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub fg: &'a Tensor<f32>,
    pub mask: &'a Tensor<f32>,
    /// Sparsity rate the mask was computed with.
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub rho: f64,
    pub activation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaeHistory {
    /// Validation MSE before any update.
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
}

impl ScaeHistory {
    pub fn final_val_mse(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_mse, |e| e.val_mse)
    }
}

/// Mean squared reconstruction error over `patches`, inference mode.
pub fn validation_mse(model: &Scae, store: &ParamStore<f32>, patches: &[RgbImage]) -> Result<f64> {
    if patches.is_empty() {
        return Err(ScaeError::Invalid("empty validation set".into()));
    }
    let side = model.config.input;
    let mut total = 0.0;
    for chunk in patches.chunks(16) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let (input, target) = patches_to_tensors(&refs, side)?;
        let mut g = Graph::eval();
        let x = g.constant(input);
        let out = model.forward(&mut g, store, x)?;
        let t = g.constant(target);
        let loss = g.mse(out.recon, t)?;
        total += g.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// MSE on `val` of the blind predictor that outputs the per-pixel mean of `train`.
pub fn mean_image_mse(train: &[RgbImage], val: &[RgbImage]) -> Result<f64> {
    let first = train.first().ok_or_else(|| ScaeError::Invalid("empty training set".into()))?;
    let len = first.as_raw().len();
    let mut mean = vec![0f64; len];
    for p in train {
        if p.as_raw().len() != len {
            return Err(ScaeError::Invalid("patches differ in extent".into()));
        }
        for (m, &v) in mean.iter_mut().zip(p.as_raw()) {
            *m += v as f64 / 255.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut total = 0.0;
    for p in val {
        total += p.as_raw().iter().zip(&mean).map(|(&v, &m)| (v as f64 / 255.0 - m).powi(2)).sum::<f64>();
    }
    Ok(total / (val.len() * len) as f64)
}

/// SGD with Nesterov momentum on the reconstruction MSE. The sparsity rate
/// follows the running average of the batch activation rates.
pub fn train_scae(
    model: &Scae,
    store: &mut ParamStore<f32>,
    train: &[RgbImage],
    val: &[RgbImage],
    cfg: &ScaeTrainConfig,
    mut observer: Option<&mut dyn FnMut(&BatchObservation)>,
) -> Result<ScaeHistory> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(ScaeError::Invalid("need training patches and a positive batch size".into()));
    }
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::sgd_nesterov(cfg.momentum),
        weight_decay: cfg.weight_decay,
    });
    let side = model.config.input;
    let initial_val_mse = validation_mse(model, store, val)?;
    log::info!("scae epoch 0: val mse {initial_val_mse:.5}");
    let mut history = ScaeHistory {
        initial_val_mse,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rate_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&RgbImage> = idx.iter().map(|&i| &train[i]).collect();
            let (input, target) = patches_to_tensors(&refs, side)?;
            let rho = model.rho(store);
            let mut g = Graph::train();
            let x = g.constant(input);
            let out = model.forward(&mut g, store, x)?;
            let t = g.constant(target);
            let loss = g.mse(out.recon, t)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(ScaeError::Diverged { epoch, batch: bi, loss: lv });
            }
            if let Some(obs) = observer.as_mut() {
                obs(&BatchObservation {
                    epoch,
                    batch: bi,
                    fg: g.value(out.fg),
                    mask: &out.mask,
                    rho,
                });
            }
            let rate = out.mask.mean() as f64;
            g.backward(loss)?.write_to_store(&g, store);
            g.apply_buffer_updates(store);
            opt.step(store, cfg.lr)?;
            if !model.config.mixed {
                model.set_rho(store, update_sparsity_rate(rho, rate, model.config.rho_momentum));
            }
            loss_sum += lv;
            rate_sum += rate;
            batches += 1;
        }
        let val_mse = validation_mse(model, store, val)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            val_mse,
            rho: model.rho(store),
            activation_rate: rate_sum / batches as f64,
        };
        log::info!(
            "scae epoch {}: train loss {:.5}, val mse {:.5}, rho {:.4}, active {:.4}",
            rec.epoch,
            rec.train_loss,
            rec.val_mse,
            rec.rho,
            rec.activation_rate
        );
        history.epochs.push(rec);
    }
    Ok(history)
}
