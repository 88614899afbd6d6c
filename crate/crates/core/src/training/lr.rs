use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then cosine decay to `floor_ratio * peak_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub floor_ratio: f64,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn new(
        peak_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        floor_ratio: f64,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_epochs,
            total_epochs,
            floor_ratio,
            steps_per_epoch,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.floor_ratio > 0.0 && self.floor_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "floor_ratio {} outside (0, 1]",
                self.floor_ratio
            )));
        }
        if !(self.peak_lr > 0.0) || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "peak_lr and steps_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn floor(&self) -> f64 {
        self.floor_ratio * self.peak_lr
    }

    /// Learning rate after `step` updates. Steps past the end clamp to the
    /// floor.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, total) = (self.warmup_steps(), self.total_steps());
        if step < w {
            return self.peak_lr * step as f64 / w as f64;
        }
        if step >= total {
            return self.floor();
        }
        let p = (step - w) as f64 / (total - w) as f64;
        let floor = self.floor();
        floor + 0.5 * (self.peak_lr - floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
