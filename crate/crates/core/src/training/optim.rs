//! Adam with bias correction and L2 weight decay.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Param;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay the weights directly instead of adding `weight_decay·w` to the
    /// gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decoupled_weight_decay: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.initial_lr > 0.0) || !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "initial_lr and epsilon must be positive, weight_decay nonnegative".into(),
            ));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    /// Completed update steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Applies one update at learning rate `lr` to every parameter that has
    /// a gradient in `grads`.
    pub fn step(&mut self, grads: &[(Arc<Param>, Tensor)], lr: f64) -> Result<()> {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (param, grad) in grads {
            let w = param.var().as_tensor();
            let mut g = grad.clone();
            if c.weight_decay > 0.0 && !c.decoupled_weight_decay {
                g = (g + (w * c.weight_decay)?)?;
            }
            let m = match self.moments.get(param.name()) {
                Some(m) => m.clone(),
                None => Moments {
                    first: w.zeros_like()?,
                    second: w.zeros_like()?,
                },
            };
            let first = ((m.first * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let second = ((m.second * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&first / bias1)?;
            let v_hat = (&second / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.epsilon)?)?;
            let mut next = (w - (update * lr)?)?;
            if c.weight_decay > 0.0 && c.decoupled_weight_decay {
                next = (next - (w * (lr * c.weight_decay))?)?;
            }
            param.var().set(&next)?;
            self.moments
                .insert(param.name().to_string(), Moments { first, second });
        }
        Ok(())
    }
}
