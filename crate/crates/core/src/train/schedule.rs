//! One-cycle learning rate: linear warmup, then cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub initial_lr: f64,
    pub max_lr: f64,
    pub warmup_frac: f64,
    /// The final rate is `max_lr / final_div`.
    pub final_div: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn new(initial_lr: f64, max_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("learning-rate schedule needs at least one step"));
        }
        if !(initial_lr > 0.0 && max_lr >= initial_lr) {
            return Err(Error::invalid(format!("need 0 < initial_lr <= max_lr, got {initial_lr} and {max_lr}")));
        }
        Ok(Self { initial_lr, max_lr, warmup_frac: 0.3, final_div: 1e4, total_steps })
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).round() as usize).clamp(1, self.total_steps)
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div
    }

    /// Rate at `step` in `0..=total_steps`; later steps hold the final rate.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            self.initial_lr + (self.max_lr - self.initial_lr) * step as f64 / warm as f64
        } else if step == warm {
            self.max_lr
        } else if step >= self.total_steps {
            self.final_lr()
        } else {
            let t = (step - warm) as f64 / (self.total_steps - warm) as f64;
            let lo = self.final_lr();
            lo + (self.max_lr - lo) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }

    /// Largest possible change between consecutive steps.
    pub fn max_step_change(&self) -> f64 {
        let warm = self.warmup_steps();
        let ramp = (self.max_lr - self.initial_lr) / warm as f64;
        let anneal = if self.total_steps > warm {
            (self.max_lr - self.final_lr()) * std::f64::consts::FRAC_PI_2 / (self.total_steps - warm) as f64
        } else {
            0.0
        };
        ramp.max(anneal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = OneCycle::new(5e-5, 0.01, 100).unwrap();
        assert_eq!(s.lr(0), 5e-5);
        assert_eq!(s.lr(30), 0.01);
        assert!((s.lr(100) - 1e-6).abs() < 1e-18);
        assert!(OneCycle::new(5e-5, 0.01, 0).is_err());
    }

    #[test]
    fn monotone_pieces() {
        let s = OneCycle::new(5e-5, 0.01, 333).unwrap();
        let w = s.warmup_steps();
        for i in 0..w {
            assert!(s.lr(i + 1) > s.lr(i));
        }
        for i in w..333 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }
}
