use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Total training instances, split equally across source languages.
    pub train_budget: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-5,
            batch_size: 32,
            epochs: 10,
            train_budget: 10_000,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("train_budget", self.train_budget),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(bad.join("; ")))
        }
    }

    /// Optimizer steps in one pass over `n` instances.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}
