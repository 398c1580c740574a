use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup-then-cosine schedule with periodic validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_iters: usize,
    pub warmup_floor: f64,
    pub total_iters: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_iters: 50,
            warmup_floor: 1e-5,
            total_iters: 12_800,
            base_lr: 1e-3,
            weight_decay: 0.01,
            eval_every: 100,
            patience: 10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_iters < self.total_iters
            && self.warmup_iters > 0
            && self.eval_every > 0
            && self.patience > 0
            && self.base_lr > 0.0
            && self.warmup_floor > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training schedule {self:?}")))
        }
    }

    /// Linear warmup from `warmup_floor` to `base_lr`, then cosine decay to 0.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::OutOfRange {
                what: "iteration",
                detail: format!("{iter} >= total_iters {}", self.total_iters),
            });
        }
        if iter < self.warmup_iters {
            let frac = iter as f64 / self.warmup_iters as f64;
            return Ok(self.warmup_floor + (self.base_lr - self.warmup_floor) * frac);
        }
        let progress = (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Source-training batch size from the class-count table.
pub fn batch_size_for(source_class_count: usize) -> Result<usize> {
    match 2 * source_class_count {
        n if n < 8 => Err(Error::BelowTableRange(n)),
        n if n < 16 => Ok(8),
        n if n < 32 => Ok(16),
        n if n < 64 => Ok(32),
        _ => Ok(64),
    }
}
