//! Plain SGD with weight decay and a piecewise-constant learning-rate
//! schedule. No momentum: desk-scale problems converge without it and the
//! update stays trivially deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    /// (first epoch, rate) pairs; each rate applies until the next entry.
    pub learning_rate_schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate_schedule.is_empty() {
            return Err(Error::InvalidConfig("empty learning-rate schedule".into()));
        }
        if self.learning_rate_schedule[0].0 != 0 {
            return Err(Error::InvalidConfig(
                "learning-rate schedule must start at epoch 0".into(),
            ));
        }
        for pair in self.learning_rate_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidConfig(
                    "learning-rate schedule epochs must strictly increase".into(),
                ));
            }
        }
        if self.learning_rate_schedule.iter().any(|&(_, r)| r <= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Rate in force at `epoch`: the last schedule entry at or before it.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut rate = self.learning_rate_schedule[0].1;
        for &(from, r) in &self.learning_rate_schedule {
            if from <= epoch {
                rate = r;
            }
        }
        rate
    }
}

/// p <- p - rate * (g + weight_decay * p), elementwise.
pub fn sgd_step<S: Scalar>(
    param: &mut DenseMatrix<S>,
    grad: &DenseMatrix<S>,
    rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            context: "sgd_step",
            expected: format!("{:?}", param.shape()),
            actual: format!("{:?}", grad.shape()),
        });
    }
    let rate = S::from_f64_lossy(rate);
    let decay = S::from_f64_lossy(weight_decay);
    for (p, &g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *p = *p - rate * (g + decay * *p);
    }
    Ok(())
}
