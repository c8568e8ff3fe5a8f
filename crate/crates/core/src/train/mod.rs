//! Training: Adam on the multi-head mean-squared error with
//! reduce-on-plateau learning-rate decay and quantized checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod run;

pub use adam::{adam_step, AdamState};
pub use run::{train, TrainOutcome};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    /// Pixels per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// Per-head loss weights (tau1, tau2, a_r).
    pub loss_weights: (f64, f64, f64),
    pub seed: u64,
    /// Checkpoint every N epochs; 0 disables checkpointing.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-5,
            batch_size: 256,
            epochs: 30,
            validation_fraction: 0.1,
            loss_weights: (1.0, 1.0, 1.0),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::config("train.lr0", "must be > 0"));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::config(
                "train.validation_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without
/// validation improvement, multiply the rate by `factor` (floored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub stale_epochs: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr0,
            best: f64::INFINITY,
            stale_epochs: 0,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_lr: cfg.min_lr,
        }
    }

    /// Feed one epoch's validation loss; returns the rate for the next
    /// epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale_epochs = 0;
            }
        }
        self.lr
    }
}

/// Multi-head MSE over masked pixels: per-head mean squared error and the
/// weighted total.
pub fn mse_multihead(
    pred: &[&[f64]; 3],
    truth: &[&[f64]; 3],
    mask: &[f64],
    weights: (f64, f64, f64),
) -> Result<(f64, [f64; 3])> {
    for head in 0..3 {
        if pred[head].len() != mask.len() || truth[head].len() != mask.len() {
            return Err(Error::Dimension(format!(
                "mse shapes disagree: pred {}, truth {}, mask {}",
                pred[head].len(),
                truth[head].len(),
                mask.len()
            )));
        }
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if m <= 0.5 {
            continue;
        }
        count += 1;
        for head in 0..3 {
            let d = pred[head][p] - truth[head][p];
            sums[head] += d * d;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedInput(
            "mse over an empty foreground mask".into(),
        ));
    }
    let heads = [
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ];
    let (w1, w2, w3) = weights;
    Ok((w1 * heads[0] + w2 * heads[1] + w3 * heads[2], heads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_total: f64,
    pub train_tau1: f64,
    pub train_tau2: f64,
    pub train_ar: f64,
    pub val_total: f64,
    pub val_tau1: f64,
    pub val_tau2: f64,
    pub val_ar: f64,
    pub lr: f64,
    pub wall_s: f64,
    pub skipped_steps: usize,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// CSV text; `wall_s` is a measurement and is excluded from any
    /// byte-determinism expectations.
    pub fn to_csv(&self, comments: &[String]) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for c in comments {
            writeln!(out, "# {c}").unwrap();
        }
        writeln!(
            out,
            "epoch,train_total,train_tau1,train_tau2,train_ar,val_total,val_tau1,val_tau2,val_ar,lr,wall_s,skipped_steps,checkpoint"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.3},{},{}",
                r.epoch,
                r.train_total,
                r.train_tau1,
                r.train_tau2,
                r.train_ar,
                r.val_total,
                r.val_tau1,
                r.val_tau2,
                r.val_ar,
                r.lr,
                r.wall_s,
                r.skipped_steps,
                r.checkpoint
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_schedule_arithmetic() {
        let cfg = TrainConfig::default();
        let mut s = PlateauSchedule::new(&cfg);
        assert_eq!(s.observe(1.0), 1e-3); // first observation improves on infinity
        for _ in 0..15 {
            s.observe(2.0);
        }
        // three full patience windows of 5 stale epochs each
        assert!((s.lr - 1.25e-4).abs() < 1e-18, "lr = {}", s.lr);
    }

    #[test]
    fn plateau_respects_min_lr() {
        let cfg = TrainConfig {
            min_lr: 3e-4,
            ..TrainConfig::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        s.observe(1.0);
        for _ in 0..50 {
            s.observe(2.0);
        }
        assert_eq!(s.lr, 3e-4);
    }

    #[test]
    fn mse_identities() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![0.5, 0.5, 0.5];
        let mask = vec![1.0, 1.0, 1.0];
        let (total, heads) = mse_multihead(
            &[&a, &b, &a],
            &[&a, &b, &a],
            &mask,
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(heads, [0.0; 3]);

        // constant offset on one head contributes delta^2
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        let (total, heads) =
            mse_multihead(&[&shifted, &b, &a], &[&a, &b, &a], &mask, (1.0, 1.0, 1.0)).unwrap();
        assert!((heads[0] - 0.0625).abs() < 1e-15);
        assert!((total - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn masked_pixels_do_not_contribute() {
        let truth = vec![1.0, 1.0, 1.0];
        let mut pred = truth.clone();
        pred[1] = 99.0; // masked out below
        let mask = vec![1.0, 0.0, 1.0];
        let (total, _) =
            mse_multihead(&[&pred, &truth, &truth], &[&truth, &truth, &truth], &mask, (1.0, 1.0, 1.0))
                .unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn empty_mask_is_undefined_input() {
        let v = vec![1.0];
        let mask = vec![0.0];
        assert!(matches!(
            mse_multihead(&[&v, &v, &v], &[&v, &v, &v], &mask, (1.0, 1.0, 1.0)),
            Err(Error::UndefinedInput(_))
        ));
    }
}
