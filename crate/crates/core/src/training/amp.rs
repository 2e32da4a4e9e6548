//! Dynamic loss scaling for reduced-precision training.
//!
//! The loss is multiplied by `loss_scale` before backpropagation and the
//! gradients divided by it afterwards. A step whose unscaled gradients contain
//! Inf/NaN is skipped and the scale backs off; after `growth_interval`
//! consecutive clean steps the scale grows.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmpConfig {
    pub enabled: bool,
    pub init_scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u32,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            init_scale: 65_536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpState {
    pub enabled: bool,
    pub loss_scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u32,
    pub steps_since_overflow: u32,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedOverflow,
}

impl AmpState {
    pub fn new(cfg: &AmpConfig) -> Result<Self> {
        if !(cfg.init_scale > 0.0) || !(cfg.growth_factor > 1.0) {
            return Err(Error::Config("init_scale must be positive and growth_factor > 1".into()));
        }
        if !(cfg.backoff_factor > 0.0 && cfg.backoff_factor < 1.0) || cfg.growth_interval == 0 {
            return Err(Error::Config(
                "backoff_factor must lie in (0, 1) and growth_interval be positive".into(),
            ));
        }
        Ok(Self {
            enabled: cfg.enabled,
            loss_scale: if cfg.enabled { cfg.init_scale } else { 1.0 },
            growth_factor: cfg.growth_factor,
            backoff_factor: cfg.backoff_factor,
            growth_interval: cfg.growth_interval,
            steps_since_overflow: 0,
            skipped_steps: 0,
        })
    }

    /// Dtype for convolutions and matmuls.
    pub fn compute_dtype(&self) -> DType {
        if self.enabled {
            DType::F16
        } else {
            DType::F32
        }
    }

    /// Multiplier applied to the loss before backprop.
    pub fn scale(&self) -> f64 {
        if self.enabled {
            self.loss_scale
        } else {
            1.0
        }
    }

    /// Updates the scale after a step; `found_non_finite` means the update
    /// must be skipped.
    pub fn update(&mut self, found_non_finite: bool) -> StepOutcome {
        if !self.enabled {
            return StepOutcome::Applied;
        }
        if found_non_finite {
            self.loss_scale *= self.backoff_factor;
            self.steps_since_overflow = 0;
            self.skipped_steps += 1;
            return StepOutcome::SkippedOverflow;
        }
        self.steps_since_overflow += 1;
        if self.steps_since_overflow >= self.growth_interval {
            self.loss_scale *= self.growth_factor;
            self.steps_since_overflow = 0;
        }
        StepOutcome::Applied
    }
}
