//! Learning-rate halving on plateau and early stopping.
//!
//! An epoch improves when its monitored loss is strictly below the best
//! seen so far. The learning rate halves after every `halving_patience`
//! consecutive non-improving epochs, and training stops once
//! `early_stop_patience` consecutive epochs have failed to improve.

use serde::{Deserialize, Serialize};

/// Halves `current_lr` when the latest loss in `history` does not improve
/// on every earlier one.
pub fn lr_on_plateau(current_lr: f64, history: &[f64]) -> f64 {
    match history.split_last() {
        Some((latest, earlier)) if earlier.iter().any(|b| latest >= b) => current_lr / 2.0,
        _ => current_lr,
    }
}

/// Whether the last `patience` epochs all failed to improve on the running
/// best before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    trailing_bad_epochs(history) >= patience
}

fn trailing_bad_epochs(history: &[f64]) -> usize {
    let mut best = f64::INFINITY;
    let mut bad = 0;
    for &l in history {
        if l < best {
            best = l;
            bad = 0;
        } else {
            bad += 1;
        }
    }
    bad
}

/// Incremental schedule state, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    /// `None` until the first epoch is observed.
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub halving_patience: usize,
    pub early_stop_patience: usize,
}

/// What one observed epoch decided.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub improved: bool,
    pub lr: f64,
    pub stop: bool,
}

impl Schedule {
    pub fn new(lr: f64, halving_patience: usize, early_stop_patience: usize) -> Self {
        Schedule {
            lr,
            best: None,
            bad_epochs: 0,
            halving_patience,
            early_stop_patience,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Step {
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs.is_multiple_of(self.halving_patience) {
                self.lr /= 2.0;
            }
        }
        Step {
            improved,
            lr: self.lr,
            stop: self.bad_epochs >= self.early_stop_patience,
        }
    }
}
