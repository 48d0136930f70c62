use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-phase learning-rate schedule: constant, linear ramp down, then a
/// per-epoch multiplicative decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_linear_lr: f64,
    pub constant_epochs: usize,
    pub linear_epochs: usize,
    pub exponential_epochs: usize,
    /// Factor applied once per epoch during the last phase.
    pub exp_decay: f64,
}

impl LrSchedule {
    /// 100 constant epochs at 1e-4, 530 linear down to 5e-6, 70 at x0.9 per epoch.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 1e-4,
            final_linear_lr: 5e-6,
            constant_epochs: 100,
            linear_epochs: 530,
            exponential_epochs: 70,
            exp_decay: 0.9,
        }
    }

    pub fn epochs(&self) -> usize {
        self.constant_epochs + self.linear_epochs + self.exponential_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.final_linear_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.exp_decay > 0.0 && self.exp_decay <= 1.0) {
            return Err(Error::Config(format!("exp_decay must be in (0, 1], got {}", self.exp_decay)));
        }
        if self.epochs() == 0 {
            return Err(Error::Config("schedule has no epochs".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    ///
    /// The linear phase reaches `final_linear_lr` on its last epoch; each
    /// exponential epoch multiplies the previous rate by `exp_decay`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs() {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs()
            )));
        }
        let c = self.constant_epochs;
        let l = self.linear_epochs;
        if epoch < c {
            return Ok(self.base_lr);
        }
        if epoch < c + l {
            let t = (epoch - c + 1) as f64 / l as f64;
            if epoch + 1 == c + l {
                return Ok(self.final_linear_lr);
            }
            return Ok(self.base_lr + (self.final_linear_lr - self.base_lr) * t);
        }
        let start = if l > 0 { self.final_linear_lr } else { self.base_lr };
        let k = (epoch + 1 - c - l) as i32;
        Ok(start * self.exp_decay.powi(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_schedule_values() {
        let s = LrSchedule::full_scale();
        assert_eq!(s.epochs(), 700);
        assert_eq!(s.lr_at(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(50).unwrap(), 1e-4);
        assert_eq!(s.lr_at(99).unwrap(), 1e-4);
        assert_eq!(s.lr_at(629).unwrap(), 5e-6);
        let e634 = s.lr_at(634).unwrap();
        assert!((e634 - 5e-6 * 0.9f64.powi(5)).abs() <= f64::EPSILON * 5e-6);
        assert!(s.lr_at(700).is_err());
    }

    #[test]
    fn linear_phase_is_monotone_and_continuous() {
        let s = LrSchedule::full_scale();
        let mut prev = s.lr_at(99).unwrap();
        for e in 100..700 {
            let lr = s.lr_at(e).unwrap();
            assert!(lr < prev, "epoch {e}");
            prev = lr;
        }
        // one linear step below the constant rate at the first linear epoch
        let step = (1e-4 - 5e-6) / 530.0;
        assert!((s.lr_at(100).unwrap() - (1e-4 - step)).abs() < 1e-18);
        // exact endpoint at the end of the linear ramp
        let closed = 1e-4 + (5e-6 - 1e-4) * 1.0;
        assert!((s.lr_at(629).unwrap() - closed).abs() <= f64::EPSILON * closed);
    }
}
