//! Soft Dice plus cross-entropy on softmax probabilities.

use std::sync::Arc;

use autoprosam_tape::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `ε` in `(2Σpg + ε) / (Σp + Σg + ε)`.
    pub dice_smooth: f64,
    pub include_background_in_dice: bool,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: 1e-5,
            include_background_in_dice: false,
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::config("loss.dice_smooth", "must be positive"));
        }
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0 && self.dice_weight.is_finite() && self.ce_weight.is_finite()) {
            return Err(Error::config("loss.dice_weight", "term weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Per-class sums `(Σ p·g, Σ p, Σ g)` for probabilities `[B, K+1, ...]`.
fn class_sums(probs: &Tensor, labels: &[u8]) -> Vec<(f64, f64, f64)> {
    let s = probs.shape();
    let (b, k1) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    let p = probs.data();
    let mut sums = vec![(0.0, 0.0, 0.0); k1];
    for bi in 0..b {
        for (c, acc) in sums.iter_mut().enumerate() {
            let base = (bi * k1 + c) * n;
            for v in 0..n {
                let pv = p[base + v];
                let g = labels[bi * n + v] as usize == c;
                acc.1 += pv;
                if g {
                    acc.0 += pv;
                    acc.2 += 1.0;
                }
            }
        }
    }
    sums
}

fn check(probs: &Tensor, labels: &[u8]) -> Result<()> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("probabilities must be [B, K+1, ...], got {s:?}")));
    }
    let (b, k1) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    if labels.len() != b * n {
        return Err(Error::Shape(format!("{} labels for {} voxels", labels.len(), b * n)));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= k1) {
        return Err(Error::Contract(format!("label {l} exceeds {} classes", k1 - 1)));
    }
    let p = probs.data();
    for bi in 0..b {
        for v in 0..n {
            let total: f64 = (0..k1).map(|c| p[(bi * k1 + c) * n + v]).sum();
            if !((total - 1.0).abs() <= 1e-4) {
                return Err(Error::Contract(format!("probabilities at voxel {v} sum to {total}, not 1")));
            }
        }
    }
    Ok(())
}

fn dice_classes(k1: usize, cfg: &LossConfig) -> std::ops::Range<usize> {
    if cfg.include_background_in_dice || k1 == 1 {
        0..k1
    } else {
        1..k1
    }
}

/// Compensated summation; keeps the voxel-mean CE accurate on large patches.
fn neumaier_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Loss value and its two terms.
pub fn seg_loss_value(probs: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<LossParts> {
    check(probs, labels)?;
    let s = probs.shape();
    let (k1, n) = (s[1], s[2..].iter().product::<usize>());
    let sums = class_sums(probs, labels);
    let eps = cfg.dice_smooth;
    let classes = dice_classes(k1, cfg);
    let count = classes.len() as f64;
    let mean: f64 = classes.map(|c| (2.0 * sums[c].0 + eps) / (sums[c].1 + sums[c].2 + eps)).sum::<f64>() / count;
    let dice = 1.0 - mean;
    let p = probs.data();
    let terms = labels.iter().enumerate().map(|(i, &l)| {
        let (bi, v) = (i / n, i % n);
        -p[(bi * k1 + l as usize) * n + v].max(f64::MIN_POSITIVE).ln()
    });
    let ce = neumaier_sum(terms) / labels.len() as f64;
    Ok(LossParts {
        total: cfg.dice_weight * dice + cfg.ce_weight * ce,
        dice,
        ce,
    })
}

struct SegLossOp {
    labels: Arc<Vec<u8>>,
    cfg: LossConfig,
}

impl CustomOp for SegLossOp {
    fn name(&self) -> &'static str {
        "seg_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let probs = inputs[0];
        let s = probs.shape();
        let (b, k1) = (s[0], s[1]);
        let n: usize = s[2..].iter().product();
        let eps = self.cfg.dice_smooth;
        let sums = class_sums(probs, &self.labels);
        let classes = dice_classes(k1, &self.cfg);
        let count = classes.len() as f64;
        let scale = grad.item();
        let mut g = Tensor::zeros(s);
        let p = probs.data();
        let out = g.data_mut();
        let total = (b * n) as f64;
        for c in classes {
            let (i, ps, gs) = sums[c];
            let den = ps + gs + eps;
            let num = 2.0 * i + eps;
            // d/dp of -(2I+ε)/(P+G+ε), averaged over classes
            let (on, off) = (-(2.0 * den - num) / (den * den), num / (den * den));
            for bi in 0..b {
                for v in 0..n {
                    let hit = self.labels[bi * n + v] as usize == c;
                    out[(bi * k1 + c) * n + v] += scale * self.cfg.dice_weight * if hit { on } else { off } / count;
                }
            }
        }
        for bi in 0..b {
            for v in 0..n {
                let l = self.labels[bi * n + v] as usize;
                let idx = (bi * k1 + l) * n + v;
                out[idx] -= scale * self.cfg.ce_weight / (total * p[idx].max(f64::MIN_POSITIVE));
            }
        }
        vec![Some(g)]
    }
}

/// Records the loss on the tape. `probs` must be softmax outputs.
pub fn seg_loss(graph: &mut Graph, probs: Var, labels: Arc<Vec<u8>>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let parts = seg_loss_value(graph.value(probs), &labels, cfg)?;
    let op = SegLossOp { labels, cfg: *cfg };
    Ok(graph.custom(&[probs], Tensor::scalar(parts.total), Box::new(op)))
}
