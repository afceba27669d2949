//! Loss, optimizer, learning-rate schedule and the training loop.

mod fit;
pub mod loss;
pub mod optim;
pub mod schedule;

pub use fit::{fit, CheckpointRecord, Dataset, EpochRecord, FitOptions, FitOutcome};
pub use loss::{seg_loss, seg_loss_value, LossConfig, LossParts};
pub use optim::{apply_freeze_policy, AdamW, FreezePolicy};
pub use schedule::{lr_at, OptimConfig};

use crate::model::Model;

/// Index of the checkpoint to keep: the highest validation score, ties
/// going to the later one. Without validation scores, the last checkpoint.
pub fn select_best<T>(checkpoints: &[T], val_scores: &[f64]) -> usize {
    if val_scores.is_empty() {
        return checkpoints.len().saturating_sub(1);
    }
    let mut best = 0;
    for (i, &s) in val_scores.iter().enumerate() {
        if s >= val_scores[best] {
            best = i;
        }
    }
    best
}

/// `(tunable, frozen)` element counts.
pub fn count_params(model: &Model) -> (usize, usize) {
    model.counts()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_is_argmax_with_later_ties() {
        assert_eq!(select_best(&[(); 3], &[0.7, 0.9, 0.8]), 1);
        assert_eq!(select_best(&[(); 2], &[0.9, 0.9]), 1);
        assert_eq!(select_best(&[(); 4], &[]), 3);
    }
}
