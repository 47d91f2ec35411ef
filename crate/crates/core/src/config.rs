use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};

/// Which head the consistency term compares across two augmented views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyHead {
    /// One-vs-all probabilities (the open-set detector).
    #[default]
    Ova,
    /// Closed-set softmax probabilities.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * cos(7 pi s / (16 S))` over the total step count `S`.
    Cosine,
}

/// Every hyper-parameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Unlabeled batch is `mu * batch_size`.
    pub mu: usize,
    pub lambda_em: f64,
    pub lambda_oc: f64,
    pub lambda_fm: f64,
    /// FixMatch confidence threshold.
    pub tau: f64,
    pub e_fix: usize,
    pub e_max: usize,
    pub i_max: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub consistency_head: ConsistencyHead,
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            mu: 2,
            lambda_em: 0.1,
            lambda_oc: 0.5,
            lambda_fm: 1.0,
            tau: 0.95,
            e_fix: 10,
            e_max: 30,
            i_max: 100,
            lr: 0.03,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            hidden: vec![64, 64],
            consistency_head: ConsistencyHead::Ova,
            eval_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.mu == 0 {
            return fail("mu must be >= 1");
        }
        if self.e_fix == 0 || self.e_fix > self.e_max {
            return fail("need 1 <= e_fix <= e_max");
        }
        if self.i_max == 0 {
            return fail("i_max must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        for (name, v) in [
            ("lambda_em", self.lambda_em),
            ("lambda_oc", self.lambda_oc),
            ("lambda_fm", self.lambda_fm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be >= 1");
        }
        self.augment.validate()
    }

    /// Learning rate for 0-based global step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let total = (self.e_max * self.i_max) as f64;
                self.lr * (7.0 * std::f64::consts::PI * step as f64 / (16.0 * total)).cos()
            }
        }
    }
}
