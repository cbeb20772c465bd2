//! Slide-classifier training with warm-up + step decay and best-AUC selection.

use std::path::Path;

use gigaslide_core::checkpoint::save_store;
use gigaslide_core::optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
use gigaslide_core::{Graph, ParamStore, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentSpec};
use crate::classifier::SlideClassifier;
use crate::data::{collate, SlideSample};
use crate::error::{HarnessError, Result};
use crate::metrics::{auc, Confusion};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerChoice {
    AdamW,
    SgdNesterov { momentum: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerChoice,
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Stop after this many epochs without a better validation AUC.
    pub patience: Option<usize>,
    pub augment: AugmentSpec,
    /// Embedding grids are padded to a multiple of this.
    pub pad_multiple: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerChoice::AdamW,
            lr_floor: 1e-6,
            lr_peak: 1e-4,
            warmup_epochs: 5,
            decay_factor: 5.0,
            decay_every: 30,
            weight_decay: 1e-5,
            epochs: 200,
            batch: 8,
            patience: None,
            augment: AugmentSpec::default(),
            pad_multiple: 8,
            seed: 17,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > 0 && self.lr_floor >= self.lr_peak {
            return Err(HarnessError::Config(format!("warm-up floor {} must be below the peak {}", self.lr_floor, self.lr_peak)));
        }
        if self.decay_factor <= 1.0 {
            return Err(HarnessError::Config(format!("decay factor {} must exceed 1", self.decay_factor)));
        }
        if self.batch == 0 || self.epochs == 0 || self.pad_multiple == 0 || self.pad_multiple % 4 != 0 {
            return Err(HarnessError::Config("batch, epochs and padding multiple (of 4) must be positive".into()));
        }
        self.schedule().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            floor: self.lr_floor,
            peak: self.lr_peak,
            warmup_epochs: self.warmup_epochs,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
        }
    }

    fn optimizer(&self) -> Optimizer<f32> {
        Optimizer::new(OptimizerConfig {
            kind: match self.optimizer {
                OptimizerChoice::AdamW => OptimizerKind::adamw(),
                OptimizerChoice::SgdNesterov { momentum } => OptimizerKind::sgd_nesterov(momentum),
            },
            weight_decay: self.weight_decay,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_auc: Option<f64>,
}

/// Per-slide output of a classifier in inference mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    /// Probability of the positive class.
    pub score: f64,
    pub stream_score: Option<f64>,
    pub loss: f64,
}

/// Scores slides one at a time, so a slide's score never depends on batch mates.
pub fn predict<M: SlideClassifier>(model: &M, store: &ParamStore<f32>, samples: &[SlideSample], pad_multiple: usize) -> Result<Vec<Scored>> {
    samples
        .iter()
        .map(|s| {
            let input = collate(&[s], pad_multiple)?;
            let mut g = Graph::eval();
            let pred = model.forward(&mut g, store, &input)?;
            let logits = g.value(pred.logits).data();
            let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = logits.iter().map(|&l| (l as f64 - m).exp()).sum();
            let p = |c: usize| (logits[c] as f64 - m).exp() / z;
            Ok(Scored {
                score: p(1),
                stream_score: pred.stream_score.map(|t| t.data()[0] as f64),
                loss: -p(s.label as usize).max(f64::MIN_POSITIVE).ln(),
            })
        })
        .collect()
}

fn labels_of(samples: &[SlideSample]) -> Vec<bool> {
    samples.iter().map(|s| s.label == 1).collect()
}

/// Trains `model` in place. After every epoch the validation AUC is measured;
/// the store ends up holding the parameters of the best epoch (earliest on
/// ties), which are also written to `checkpoint` whenever they improve. A
/// non-finite loss or gradient restores the best parameters seen so far (or
/// the initial ones) and returns [`HarnessError::Diverged`].
pub fn train_classifier<M: SlideClassifier>(
    model: &M,
    store: &mut ParamStore<f32>,
    train: &[SlideSample],
    val: &[SlideSample],
    cfg: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(HarnessError::Data("training and validation sets must be non-empty".into()));
    }
    let schedule = cfg.schedule();
    let mut opt = cfg.optimizer();
    let steps = train.len().div_ceil(cfg.batch);
    let val_labels = labels_of(val);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial = store.clone();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            lr = schedule.lr(epoch, step, steps);
            let items: Vec<SlideSample> = idx.iter().map(|&i| augment(&train[i], &cfg.augment, &mut rng)).collect();
            let input = collate(&items.iter().collect::<Vec<_>>(), cfg.pad_multiple)?;
            let labels: Vec<usize> = items.iter().map(|s| s.label as usize).collect();
            let mut g = Graph::train();
            let pred = model.forward(&mut g, store, &input)?;
            let loss = g.softmax_cross_entropy(pred.logits, &labels)?;
            let lv = g.value(loss).item() as f64;
            let diverged = |detail: String, store: &mut ParamStore<f32>, best: &Option<(f64, usize, ParamStore<f32>)>| {
                let good = best.as_ref().map_or(&initial, |b| &b.2);
                if let Err(e) = store.load_from(good) {
                    return HarnessError::from(e);
                }
                HarnessError::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail,
                }
            };
            if !lv.is_finite() {
                return Err(diverged(format!("loss {lv}"), store, &best));
            }
            g.backward(loss)?.write_to_store(&g, store);
            g.apply_buffer_updates(store);
            match opt.step(store, lr) {
                Ok(()) => {}
                Err(TensorError::NonFiniteGradient { name }) => {
                    return Err(diverged(format!("non-finite gradient for {name}"), store, &best));
                }
                Err(e) => return Err(e.into()),
            }
            loss_sum += lv * idx.len() as f64;
        }
        let scored = predict(model, store, val, cfg.pad_multiple)?;
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let val_auc = auc(&scores, &val_labels);
        let val_loss = scored.iter().map(|s| s.loss).sum::<f64>() / val.len() as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_auc,
            val_accuracy: Confusion::at(&scores, &val_labels, 0.5).accuracy(),
        };
        log::info!(
            "epoch {}: lr {:.2e}, train loss {:.4}, val loss {:.4}, val auc {}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.val_loss,
            rec.val_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        // a single-class validation set has no AUC; fall back to the loss
        let metric = val_auc.unwrap_or(-val_loss);
        history.push(rec);
        if best.as_ref().map_or(true, |(m, _, _)| metric > *m) {
            if let Some(path) = checkpoint {
                save_store(path, store)?;
            }
            best = Some((metric, epoch + 1, store.clone()));
        }
        if let (Some(p), Some((_, be, _))) = (cfg.patience, &best) {
            if epoch + 1 - be >= p {
                log::info!("no improvement for {p} epochs, stopping at epoch {}", epoch + 1);
                break;
            }
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    store.load_from(&snapshot)?;
    Ok(TrainOutcome {
        best_auc: history[best_epoch - 1].val_auc,
        history,
        best_epoch,
    })
}
