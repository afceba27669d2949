//! Optimizer settings and the warmup / exponential-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; not applied to norms or the depth table.
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Learning rate at the start of the last epoch, as a fraction of base.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Validate every this many epochs (the final epoch is always validated).
    pub val_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 200,
            warmup_epochs: 5,
            final_lr_fraction: 0.01,
            batch_size: 1,
            steps_per_epoch: 250,
            val_every: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: &str| Err(Error::config(format!("optim.{k}"), d));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr", "must be positive");
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", "need warmup_epochs < epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "moment coefficients must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps", "eps must be positive and weight_decay nonnegative");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction", "must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.val_every == 0 {
            return bad("batch_size", "batch_size, steps_per_epoch and val_every must be positive");
        }
        Ok(())
    }

    /// Per-epoch decay factor `γ = f^(1 / (epochs - 1 - warmup))`, so the
    /// last epoch starts at exactly `base · f`.
    pub fn gamma(&self) -> f64 {
        let span = self.epochs.saturating_sub(1 + self.warmup_epochs);
        if span == 0 {
            1.0
        } else {
            self.final_lr_fraction.powf(1.0 / span as f64)
        }
    }
}

/// Linear per-step warmup from 0 to `base_lr`, then `base_lr·γ^(epoch - warmup)`
/// held constant within each epoch.
pub fn lr_at(epoch: usize, step_in_epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let done = (epoch * cfg.steps_per_epoch + step_in_epoch) as f64;
        return cfg.base_lr * done / (cfg.warmup_epochs * cfg.steps_per_epoch) as f64;
    }
    cfg.base_lr * cfg.gamma().powi((epoch - cfg.warmup_epochs) as i32)
}
