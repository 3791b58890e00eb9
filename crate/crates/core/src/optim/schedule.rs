use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-cycle learning rate: cosine rise from `start_lr` to `max_lr` over the
/// warmup steps, then cosine anneal to `final_lr` at the last step.
///
/// The schedule is a pure function of the step index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub start_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
}

impl OneCycleSchedule {
    pub fn new(
        start_lr: f64,
        max_lr: f64,
        final_lr: f64,
        warmup_frac: f64,
        total_steps: usize,
    ) -> Result<Self> {
        let s = Self {
            start_lr,
            max_lr,
            final_lr,
            warmup_frac,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Fine-tuning defaults: 4e-7 → 1e-5 → 2e-8 with 10% warmup.
    pub fn emojich(total_steps: usize) -> Result<Self> {
        Self::new(4e-7, 1e-5, 2e-8, 0.1, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction must be in (0,1), got {}",
                self.warmup_frac
            )));
        }
        if self.total_steps < 2 {
            return Err(Error::InvalidArgument(
                "one-cycle needs at least 2 steps".into(),
            ));
        }
        if !(self.start_lr <= self.max_lr && self.final_lr <= self.max_lr) {
            return Err(Error::InvalidArgument(
                "start and final lr must not exceed max lr".into(),
            ));
        }
        Ok(())
    }

    /// First step of the anneal phase, `ceil(warmup_frac * total)`.
    pub fn warmup_end(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).ceil() as usize).min(self.total_steps - 1)
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let last = self.total_steps - 1;
        let we = self.warmup_end();
        if t == last {
            return Ok(self.final_lr);
        }
        if t < we {
            let p = t as f64 / we as f64;
            let w = 0.5 * (1.0 - (std::f64::consts::PI * p).cos());
            return Ok(self.start_lr + (self.max_lr - self.start_lr) * w);
        }
        let p = (t - we) as f64 / (last - we) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        Ok(self.final_lr + (self.max_lr - self.final_lr) * w)
    }
}
