use serde::{Deserialize, Serialize};

use super::GammaBounds;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Half-cosine decay from `eta` to 0 over the run.
    Cosine,
    Constant,
    /// Linear decay from `eta` to 0 over the run.
    Linear,
}

/// How the balanced parameter γ is chosen for binary layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// Flip proportion times max gradient magnitude, clamped.
    Adaptive,
    /// Fixed value for every channel, not clamped.
    Constant(f64),
    /// Max gradient magnitude alone, clamped.
    MaxGradOnly,
    /// Plain straight-through baseline: no reconstruction term at all.
    Off,
}

impl GammaMode {
    pub fn label(&self) -> String {
        match self {
            GammaMode::Adaptive => "adaptive".into(),
            GammaMode::Constant(c) => format!("constant({c:e})"),
            GammaMode::MaxGradOnly => "max-grad-only".into(),
            GammaMode::Off => "off".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_init: f64,
    pub gamma_mode: GammaMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            schedule: Schedule::Cosine,
            gamma_min: 1e-5,
            gamma_max: 2e-4,
            gamma_init: 1e-4,
            gamma_mode: GammaMode::Adaptive,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.gamma_min <= self.gamma_init && self.gamma_init <= self.gamma_max) {
            return fail(format!(
                "need gamma_min <= gamma_init <= gamma_max, got {} / {} / {}",
                self.gamma_min, self.gamma_init, self.gamma_max
            ));
        }
        if let GammaMode::Constant(c) = self.gamma_mode {
            if !(c >= 0.0 && c.is_finite()) {
                return fail(format!("constant gamma must be >= 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn gamma_bounds(&self) -> GammaBounds {
        GammaBounds {
            min: self.gamma_min,
            max: self.gamma_max,
        }
    }

    /// γ every binary channel starts from.
    pub fn initial_gamma(&self) -> f64 {
        match self.gamma_mode {
            GammaMode::Adaptive | GammaMode::MaxGradOnly => self.gamma_init,
            GammaMode::Constant(c) => c,
            GammaMode::Off => 0.0,
        }
    }
}
