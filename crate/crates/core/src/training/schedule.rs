use crate::error::{Error, Result};
use crate::numcore::GroupRates;

/// Staged finetuning: imagination groups alone, then imagination groups with
/// a slow base, then everything at one common rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub fractions: [f64; 3],
    pub stage1_imagination: f64,
    pub stage2_imagination: f64,
    pub stage2_base: f64,
    pub stage3_all: f64,
    /// Scales every rate; the ratios between stages are preserved.
    pub multiplier: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            fractions: [0.25, 0.25, 0.5],
            stage1_imagination: 1e-4,
            stage2_imagination: 5e-5,
            stage2_base: 1e-6,
            stage3_all: 1e-6,
            multiplier: 10.0,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("stage fractions {:?} must be non-negative and sum to 1", self.fractions)));
        }
        let rates = [self.stage1_imagination, self.stage2_imagination, self.stage2_base, self.stage3_all, self.multiplier];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// First iteration of stages 2 and 3.
    pub fn boundaries(&self, iterations: usize) -> (usize, usize) {
        let n = iterations as f64;
        let b1 = (self.fractions[0] * n).round() as usize;
        let b2 = ((self.fractions[0] + self.fractions[1]) * n).round() as usize;
        (b1.min(iterations), b2.min(iterations))
    }

    /// Stage number (1..=3) and group rates at `iter`.
    pub fn rates(&self, iter: usize, iterations: usize) -> Result<(usize, GroupRates)> {
        if iter >= iterations {
            return Err(Error::Contract(format!("iteration {iter} outside schedule of {iterations}")));
        }
        let m = self.multiplier;
        let (b1, b2) = self.boundaries(iterations);
        Ok(if iter < b1 {
            (1, GroupRates { imagination_encoder: m * self.stage1_imagination, type_embedding: m * self.stage1_imagination, base: 0.0 })
        } else if iter < b2 {
            (
                2,
                GroupRates {
                    imagination_encoder: m * self.stage2_imagination,
                    type_embedding: m * self.stage2_imagination,
                    base: m * self.stage2_base,
                },
            )
        } else {
            (3, GroupRates::uniform(m * self.stage3_all))
        })
    }
}

/// How the learning rate evolves over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Staged(StageSchedule),
    /// One rate for every group throughout; used to train base agents.
    Constant(f64),
}

impl Schedule {
    pub fn rates(&self, iter: usize, iterations: usize) -> Result<(usize, GroupRates)> {
        match self {
            Schedule::Staged(s) => s.rates(iter, iterations),
            Schedule::Constant(lr) => {
                if iter >= iterations {
                    return Err(Error::Contract(format!("iteration {iter} outside schedule of {iterations}")));
                }
                Ok((1, GroupRates::uniform(*lr)))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Staged(s) => s.validate(),
            Schedule::Constant(lr) if lr.is_finite() && *lr > 0.0 => Ok(()),
            Schedule::Constant(lr) => Err(Error::Config(format!("constant learning rate must be positive, got {lr}"))),
        }
    }
}
