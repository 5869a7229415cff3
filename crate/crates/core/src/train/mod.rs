//! Optimization, schedules, checkpoints, weight transfer and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;
pub mod transfer;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use schedule::{early_stop, lr_on_plateau, Schedule};
pub use trainer::{EpochLog, Trainer};
pub use transfer::{transfer_weights, TransferReport};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_halving_patience: 1,
            early_stop_patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.learning_rate, self.lr_halving_patience, self.early_stop_patience)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size and patience values must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }
}
