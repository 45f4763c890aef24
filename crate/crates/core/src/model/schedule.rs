use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Warmup–stable–decay learning-rate schedule over `total_steps` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    /// Fraction of `total_steps` spent decaying linearly to zero.
    pub decay_fraction: f64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, peak_lr: f64, total_steps: u64, decay_fraction: f64) -> Result<Self> {
        let s = Self {
            warmup_steps,
            peak_lr,
            total_steps,
            decay_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return invalid(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return invalid(format!("decay_fraction must be in (0, 1], got {}", self.decay_fraction));
        }
        if self.warmup_steps + self.decay_steps() > self.total_steps {
            return invalid("warmup and decay do not fit in total_steps");
        }
        Ok(())
    }

    pub fn decay_steps(&self) -> u64 {
        (self.decay_fraction * self.total_steps as f64).round() as u64
    }

    pub fn decay_start(&self) -> u64 {
        self.total_steps - self.decay_steps()
    }

    /// Learning rate used for the update at step `t`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t >= self.total_steps {
            return invalid(format!("step {t} outside schedule of {} steps", self.total_steps));
        }
        let peak = self.peak_lr;
        Ok(if t < self.warmup_steps {
            peak * t as f64 / self.warmup_steps as f64
        } else if t >= self.decay_start() {
            peak * (self.total_steps - t) as f64 / self.decay_steps() as f64
        } else {
            peak
        })
    }

    /// Sum of learning rates over steps `[from, to)`.
    pub fn lr_sum(&self, from: u64, to: u64) -> Result<f64> {
        let mut s = 0.0;
        for t in from..to {
            s += self.lr_at(t)?;
        }
        Ok(s)
    }
}

/// Any per-step learning-rate rule the training loop can follow.
pub trait LrSchedule {
    fn lr_at(&self, t: u64) -> Result<f64>;
    fn total_steps(&self) -> u64;
}

impl LrSchedule for Schedule {
    fn lr_at(&self, t: u64) -> Result<f64> {
        Schedule::lr_at(self, t)
    }

    fn total_steps(&self) -> u64 {
        self.total_steps
    }
}

/// Two back-to-back schedules; the second restarts its own clock at
/// `first.total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staged {
    pub first: Schedule,
    pub second: Schedule,
}

impl LrSchedule for Staged {
    fn lr_at(&self, t: u64) -> Result<f64> {
        if t < self.first.total_steps {
            self.first.lr_at(t)
        } else {
            self.second.lr_at(t - self.first.total_steps)
        }
    }

    fn total_steps(&self) -> u64 {
        self.first.total_steps + self.second.total_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wsd_examples() {
        let s = Schedule::new(10, 0.1, 100, 0.1).unwrap();
        assert!((s.lr_at(5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(s.lr_at(50).unwrap(), 0.1);
        assert!((s.lr_at(95).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(s.lr_at(90).unwrap(), 0.1);
        assert!(s.lr_at(99).unwrap() > 0.0);
        assert!(s.lr_at(100).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Schedule::new(95, 0.1, 100, 0.1).is_err());
        assert!(Schedule::new(0, 0.0, 100, 0.1).is_err());
        assert!(Schedule::new(0, 0.1, 100, 0.0).is_err());
        assert!(Schedule::new(0, 0.1, 100, 1.0).is_ok());
    }

    #[test]
    fn staged_restarts_clock() {
        let st = Staged {
            first: Schedule::new(2, 0.1, 10, 0.2).unwrap(),
            second: Schedule::new(2, 0.1, 10, 0.2).unwrap(),
        };
        assert_eq!(LrSchedule::total_steps(&st), 20);
        for t in 0..10 {
            assert_eq!(st.lr_at(t).unwrap(), st.lr_at(t + 10).unwrap());
        }
        assert!(st.lr_at(20).is_err());
    }

    #[test]
    fn positive_after_first_step() {
        let s = Schedule::new(7, 0.3, 53, 0.2).unwrap();
        for t in 1..53 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr > 0.0 && lr <= 0.3, "t={t} lr={lr}");
        }
    }
}
