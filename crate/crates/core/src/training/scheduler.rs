//! Reduce-on-plateau learning-rate control, minimizing validation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: u32,
    /// Absolute improvement required to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 3,
            threshold: 1e-4,
            min_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauMode {
    #[default]
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub mode: PlateauMode,
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    /// `None` until the first observation.
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: u32,
    pub current_lr: f64,
    pub min_lr: f64,
}

impl SchedulerState {
    pub fn new(cfg: &SchedulerConfig, initial_lr: f64) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) {
            return Err(Error::Config(format!("scheduler factor must lie in (0, 1), got {}", cfg.factor)));
        }
        if !(cfg.min_lr >= 0.0) || !(cfg.threshold >= 0.0) {
            return Err(Error::Config("min_lr and threshold must be nonnegative".into()));
        }
        Ok(Self {
            mode: PlateauMode::Min,
            factor: cfg.factor,
            patience: cfg.patience,
            threshold: cfg.threshold,
            best_val_loss: None,
            epochs_since_improvement: 0,
            current_lr: initial_lr,
            min_lr: cfg.min_lr,
        })
    }

    /// Records one validation loss. Returns true when the rate was reduced.
    pub fn step(&mut self, val_loss: f64) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        let improved = match self.best_val_loss {
            None => true,
            Some(best) => val_loss < best - self.threshold,
        };
        if improved {
            self.best_val_loss = Some(val_loss);
            self.epochs_since_improvement = 0;
            return Ok(false);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.epochs_since_improvement = 0;
            let next = (self.current_lr * self.factor).max(self.min_lr);
            let reduced = next < self.current_lr;
            self.current_lr = next;
            return Ok(reduced);
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sched() -> SchedulerState {
        SchedulerState::new(&SchedulerConfig::default(), 5e-4).unwrap()
    }

    #[test]
    fn four_flat_epochs_cut_the_rate_tenfold() {
        let mut s = sched();
        s.step(0.7).unwrap();
        let cuts: Vec<bool> = (0..4).map(|_| s.step(0.7).unwrap()).collect();
        assert_eq!(cuts, [false, false, false, true]);
        assert!((s.current_lr - 5e-5).abs() < 1e-18);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn improving_losses_never_cut() {
        let mut s = sched();
        for i in 0..50 {
            assert!(!s.step(1.0 - i as f64 * 0.01).unwrap());
        }
        assert_eq!(s.current_lr, 5e-4);
    }

    #[test]
    fn sub_threshold_gains_count_as_plateau() {
        let mut s = sched();
        s.step(1.0).unwrap();
        for i in 1..=4 {
            s.step(1.0 - i as f64 * 1e-5).unwrap();
        }
        assert!((s.current_lr - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn floor_holds() {
        let mut s = sched();
        s.current_lr = s.min_lr;
        s.step(1.0).unwrap();
        for _ in 0..20 {
            assert!(!s.step(1.0).unwrap());
        }
        assert_eq!(s.current_lr, 1e-7);
    }

    #[test]
    fn rejects_nan_and_bad_factor() {
        assert!(sched().step(f64::NAN).is_err());
        let bad = SchedulerConfig {
            factor: 1.0,
            ..Default::default()
        };
        assert!(SchedulerState::new(&bad, 1e-3).is_err());
    }

    proptest! {
        #[test]
        fn rate_never_increases(losses in prop::collection::vec(0.0f64..2.0, 1..80)) {
            let mut s = sched();
            let mut last = s.current_lr;
            for l in losses {
                let before = s.current_lr;
                let cut = s.step(l).unwrap();
                prop_assert!(s.current_lr <= last);
                if cut {
                    let expected = (before * s.factor).max(s.min_lr);
                    prop_assert_eq!(s.current_lr, expected);
                } else {
                    prop_assert_eq!(s.current_lr, before);
                }
                last = s.current_lr;
            }
        }
    }
}
