//! Multi-task optimization: summed CCE, plateau halving, early stopping.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, padded_scene, Batch, PatchRef, PreparedScene};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelState, MultiTaskNet, Task, INPUT_MULTIPLE};
use crate::tensor::{add, no_grad, softmax_cce, Adam, AdamConfig, BnMode, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    /// Epochs without validation improvement before the learning rate is scaled.
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub repeats: usize,
    /// Optimizer steps per epoch; 0 means one pass over all patches.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            early_stop_patience: 10,
            initial_lr: 1e-5,
            plateau_factor: 0.5,
            plateau_patience: 4,
            batch_size: 8,
            seed: 0,
            repeats: 2,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for a randomly initialized mini network.
    pub fn desk() -> Self {
        TrainConfig { initial_lr: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(invalid!("patience values must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(invalid!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.repeats == 0 {
            return Err(invalid!("batch_size, max_epochs and repeats must be positive"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(invalid!("initial_lr must be positive"));
        }
        Ok(())
    }
}

/// Unweighted sum of the three task losses.
pub fn aggregate_loss<T: crate::tensor::Real>(sic: &Tensor<T>, sod: &Tensor<T>, floe: &Tensor<T>) -> Result<Tensor<T>> {
    add(&add(sic, sod)?, floe)
}

/// What the schedulers decided after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerStep {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Plateau learning-rate halving and early stopping, both keyed on validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedulers {
    pub lr: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub halvings: u32,
    epochs_since_best: usize,
    plateau_count: usize,
    factor: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
}

impl Schedulers {
    pub fn new(cfg: &TrainConfig) -> Self {
        Schedulers {
            lr: cfg.initial_lr,
            best: f64::INFINITY,
            best_epoch: None,
            halvings: 0,
            epochs_since_best: 0,
            plateau_count: 0,
            factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
        }
    }

    /// Records one epoch's validation loss; "improvement" is a strict decrease.
    pub fn step(&mut self, epoch: usize, val_loss: f64) -> SchedulerStep {
        let improved = val_loss < self.best;
        let mut lr_reduced = false;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            self.plateau_count = 0;
        } else {
            self.epochs_since_best += 1;
            self.plateau_count += 1;
            if self.plateau_count >= self.plateau_patience {
                self.lr *= self.factor;
                self.halvings += 1;
                self.plateau_count = 0;
                lr_reduced = true;
            }
        }
        SchedulerStep {
            improved,
            lr_reduced,
            stop: self.epochs_since_best >= self.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl RunLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{:.3}\n", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Equal in everything but wall time.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.stop_reason == other.stop_reason
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.train_loss == b.train_loss && a.val_loss == b.val_loss && a.lr == b.lr
            })
    }
}

/// Per-task CCE values and their sum for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub tasks: [f64; 3],
}

fn batch_losses(net: &MultiTaskNet<f32>, batch: &Batch) -> Result<(Tensor<f32>, BatchLoss)> {
    let out = net.forward(&batch.inputs)?;
    let cce: Vec<Tensor<f32>> = Task::ALL
        .iter()
        .zip(&batch.targets)
        .map(|(&t, tg)| softmax_cce(out.get(t), tg).map(|c| c.loss))
        .collect::<Result<_>>()?;
    let total = aggregate_loss(&cce[0], &cce[1], &cce[2])?;
    let tasks = [cce[0].item() as f64, cce[1].item() as f64, cce[2].item() as f64];
    let loss = BatchLoss { total: total.item() as f64, tasks };
    Ok((total, loss))
}

/// One forward / backward / Adam update in train mode.
pub fn train_step(net: &mut MultiTaskNet<f32>, adam: &mut Adam<f32>, batch: &Batch) -> Result<BatchLoss> {
    net.set_mode(BnMode::Train);
    net.zero_grad();
    let (total, loss) = batch_losses(net, batch)?;
    if loss.total.is_finite() {
        total.backward()?;
        adam.step(&net.parameters())?;
    }
    Ok(loss)
}

/// Mean aggregated loss over whole scenes in eval mode.
pub fn validation_loss(net: &mut MultiTaskNet<f32>, scenes: &[PreparedScene]) -> Result<f64> {
    let prev = net.mode();
    net.set_mode(BnMode::Eval);
    let mut acc = 0.0;
    let result = (|| {
        for s in scenes {
            let batch = padded_scene(s, INPUT_MULTIPLE)?;
            let (_, loss) = no_grad(|| batch_losses(net, &batch))?;
            acc += loss.total;
        }
        Ok(acc / scenes.len() as f64)
    })();
    net.set_mode(prev);
    result
}

pub struct TrainOutcome {
    pub log: RunLog,
    /// Parameters and statistics of the best validation epoch (already restored into the net).
    pub best: ModelState<f32>,
}

/// Trains until early stop or `max_epochs`, then restores the best-validation weights.
pub fn train_loop(
    net: &mut MultiTaskNet<f32>,
    scenes: &[PreparedScene],
    patches: &[PatchRef],
    val: &[PreparedScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() || val.is_empty() {
        return Err(invalid!("training needs at least one patch and one validation scene"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.initial_lr, ..AdamConfig::default() });
    let mut sched = Schedulers::new(cfg);
    let mut best = net.snapshot();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut cursor = order.len();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let steps = if cfg.steps_per_epoch == 0 { patches.len().div_ceil(cfg.batch_size) } else { cfg.steps_per_epoch };
        adam.set_lr(sched.lr);
        let mut sum = 0.0;
        if cfg.steps_per_epoch == 0 {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        for b in 0..steps {
            let mut idx = Vec::with_capacity(cfg.batch_size);
            while idx.len() < cfg.batch_size {
                if cursor == order.len() {
                    // A full pass ends with a short batch instead of wrapping.
                    if cfg.steps_per_epoch == 0 {
                        break;
                    }
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(patches[order[cursor]]);
                cursor += 1;
            }
            let batch = assemble_batch(scenes, &idx)?;
            let loss = train_step(net, &mut adam, &batch)?;
            if !loss.total.is_finite() {
                let [sic, sod, floe] = loss.tasks;
                return Err(Error::NonFiniteLoss { epoch, batch: b, sic, sod, floe });
            }
            sum += loss.total;
        }
        let val_loss = validation_loss(net, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: steps, sic: f64::NAN, sod: f64::NAN, floe: f64::NAN });
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / steps as f64,
            val_loss,
            lr: sched.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {:.4} val {:.4} lr {:.2e}", record.train_loss, val_loss, sched.lr);
        epochs.push(record);
        let decision = sched.step(epoch, val_loss);
        if decision.improved {
            best = net.snapshot();
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    net.restore(&best)?;
    Ok(TrainOutcome {
        log: RunLog { epochs, best_epoch: sched.best_epoch, stop_reason },
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(plateau: usize, early: usize) -> TrainConfig {
        TrainConfig { plateau_patience: plateau, early_stop_patience: early, initial_lr: 1.0, ..Default::default() }
    }

    #[test]
    fn sum_of_losses() {
        let [a, b, c] = [1.0, 2.0, 0.5].map(Tensor::<f64>::scalar);
        assert_eq!(aggregate_loss(&a, &b, &c).unwrap().item(), 3.5);
        let z = Tensor::<f64>::scalar(0.0);
        assert_eq!(aggregate_loss(&z, &z, &z).unwrap().item(), 0.0);
    }

    #[test]
    fn improving_losses_keep_lr() {
        let mut s = Schedulers::new(&cfg(4, 10));
        for (e, v) in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5].iter().enumerate() {
            assert!(s.step(e + 1, *v).improved);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn flat_losses_halve_after_epoch_five() {
        let mut s = Schedulers::new(&cfg(4, 10));
        let steps: Vec<_> = (1..=5).map(|e| s.step(e, 1.0)).collect();
        assert!(steps[..4].iter().all(|d| !d.lr_reduced));
        assert!(steps[4].lr_reduced);
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn early_stop_after_ten_flat_epochs() {
        let mut s = Schedulers::new(&cfg(4, 10));
        s.step(1, 0.5);
        s.step(2, 0.4);
        let mut stopped_at = None;
        for e in 3..30 {
            if s.step(e, 0.45).stop {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(s.best_epoch, Some(2));
        assert_eq!(s.lr, 0.25);
    }
}
