//! Step-down learning-rate schedule on validation-loss saturation.

use super::TrainConfig;

/// Learning rate for the next epoch given the validation losses so far.
///
/// An epoch is non-improving when its loss is not lower than the previous
/// epoch's by more than `saturation_eps`. After `patience` consecutive
/// non-improving epochs the rate is divided by `lr_drop_factor` and the count
/// restarts; at most `max_drops` reductions happen over a run. The whole
/// history is replayed, so the result depends only on its arguments.
pub fn lr_step(val_losses: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    let mut stale = 0usize;
    let mut drops = 0usize;
    let mut dropped_last = false;
    for (i, w) in val_losses.windows(2).enumerate() {
        dropped_last = false;
        if w[0] - w[1] > cfg.saturation_eps {
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience && drops < cfg.max_drops {
            drops += 1;
            stale = 0;
            dropped_last = i + 2 == val_losses.len();
        }
    }
    if dropped_last {
        current_lr / cfg.lr_drop_factor
    } else {
        current_lr
    }
}

/// Number of reductions the schedule has applied over `val_losses`.
pub fn drops_so_far(val_losses: &[f64], cfg: &TrainConfig) -> usize {
    (2..=val_losses.len())
        .filter(|&k| lr_step(&val_losses[..k], 1.0, cfg) != 1.0)
        .count()
}
