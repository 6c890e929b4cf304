use std::fmt;
use std::str::FromStr;

use super::schedule::{Schedule, StageSchedule};
use crate::agent::DEFAULT_MAX_STEPS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLoss {
    Cosine,
    InfoNce,
    None,
}

impl AuxLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxLoss::Cosine => "cosine",
            AuxLoss::InfoNce => "infonce",
            AuxLoss::None => "none",
        }
    }
}

impl fmt::Display for AuxLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuxLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(AuxLoss::Cosine),
            "infonce" => Ok(AuxLoss::InfoNce),
            "none" => Ok(AuxLoss::None),
            _ => Err(Error::Config(format!("unknown auxiliary loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Weight of the cosine alignment term.
    pub lambda: f64,
    pub aux_loss: AuxLoss,
    /// Weight of the InfoNCE term, used instead of `lambda` when it is active.
    pub infonce_lambda: f64,
    pub tau: f64,
    /// First stage (1..=3) in which the auxiliary term is weighted; earlier
    /// stages train on `L_base` alone.
    pub aux_from_stage: usize,
    pub schedule: Schedule,
    /// Validation success rate is measured every this many iterations; 0
    /// turns it off.
    pub eval_interval: usize,
    /// Probability of replacing each instruction token by `<unk>` in
    /// training rollouts.
    pub word_dropout: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 8,
            lambda: 0.5,
            aux_loss: AuxLoss::Cosine,
            infonce_lambda: 0.2,
            tau: 0.1,
            aux_from_stage: 1,
            schedule: Schedule::Staged(StageSchedule::default()),
            eval_interval: 0,
            word_dropout: 0.0,
            max_steps: DEFAULT_MAX_STEPS,
            seed: 0,
        }
    }
}

fn staged(s: &mut Schedule) -> &mut StageSchedule {
    if let Schedule::Constant(_) = s {
        *s = Schedule::Staged(StageSchedule::default());
    }
    match s {
        Schedule::Staged(st) => st,
        Schedule::Constant(_) => unreachable!("replaced above"),
    }
}

impl TrainConfig {
    /// The weight applied to whichever auxiliary term is active in `stage`.
    pub fn aux_weight_at(&self, stage: usize) -> f64 {
        if stage < self.aux_from_stage {
            0.0
        } else {
            self.aux_weight()
        }
    }

    /// The weight applied to whichever auxiliary term is active.
    pub fn aux_weight(&self) -> f64 {
        match self.aux_loss {
            AuxLoss::Cosine => self.lambda,
            AuxLoss::InfoNce => self.infonce_lambda,
            AuxLoss::None => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Config("iterations and batch must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.infonce_lambda >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("InfoNCE temperature must be positive, got {}", self.tau)));
        }
        if !(1..=3).contains(&self.aux_from_stage) {
            return Err(Error::Config(format!("aux_from_stage {} outside 1..=3", self.aux_from_stage)));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!("word dropout {} outside [0, 1)", self.word_dropout)));
        }
        self.schedule.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("iterations", self.iterations.to_string()),
            ("batch", self.batch.to_string()),
            ("lambda", self.lambda.to_string()),
            ("aux_loss", self.aux_loss.to_string()),
            ("infonce_lambda", self.infonce_lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("aux_from_stage", self.aux_from_stage.to_string()),
        ];
        match &self.schedule {
            Schedule::Constant(lr) => {
                kv.push(("schedule", "constant".into()));
                kv.push(("lr", lr.to_string()));
            }
            Schedule::Staged(s) => {
                kv.push(("schedule", "staged".into()));
                kv.push(("fractions", s.fractions.map(|f| f.to_string()).join(",")));
                kv.push(("stage1_lr", s.stage1_imagination.to_string()));
                kv.push(("stage2_lr", s.stage2_imagination.to_string()));
                kv.push(("stage2_base_lr", s.stage2_base.to_string()));
                kv.push(("stage3_lr", s.stage3_all.to_string()));
                kv.push(("lr_multiplier", s.multiplier.to_string()));
            }
        }
        kv.push(("eval_interval", self.eval_interval.to_string()));
        kv.push(("word_dropout", self.word_dropout.to_string()));
        kv.push(("max_steps", self.max_steps.to_string()));
        kv.push(("seed", self.seed.to_string()));
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one `key = value` setting. Stage settings switch the schedule
    /// to the staged form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "aux_loss" => self.aux_loss = value.parse()?,
            "infonce_lambda" => self.infonce_lambda = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "aux_from_stage" => self.aux_from_stage = num(key, value)?,
            "schedule" => match value {
                "staged" => {
                    staged(&mut self.schedule);
                }
                "constant" => {
                    if !matches!(self.schedule, Schedule::Constant(_)) {
                        self.schedule = Schedule::Constant(1e-3);
                    }
                }
                _ => return Err(Error::Config(format!("unknown schedule {value:?}"))),
            },
            "lr" => self.schedule = Schedule::Constant(num(key, value)?),
            "fractions" => {
                let parts: Vec<f64> = value.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                let f: [f64; 3] =
                    parts.try_into().map_err(|_| Error::Config(format!("fractions needs three values, got {value:?}")))?;
                staged(&mut self.schedule).fractions = f;
            }
            "stage1_lr" => staged(&mut self.schedule).stage1_imagination = num(key, value)?,
            "stage2_lr" => staged(&mut self.schedule).stage2_imagination = num(key, value)?,
            "stage2_base_lr" => staged(&mut self.schedule).stage2_base = num(key, value)?,
            "stage3_lr" => staged(&mut self.schedule).stage3_all = num(key, value)?,
            "lr_multiplier" => staged(&mut self.schedule).multiplier = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "word_dropout" => self.word_dropout = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training setting {key:?}"))),
        }
        Ok(())
    }
}
