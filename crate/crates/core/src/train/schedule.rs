//! One-cycle learning rate: linear warmup, then cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRSNET_MAX_LR: f64 = 1e-3;
pub const DMGFORMER_MAX_LR: f64 = 2e-4;
/// Warmup starts at `max_lr` times this.
pub const WARMUP_START_FACTOR: f64 = 1.0 / 25.0;
/// Decay ends at `max_lr` times this.
pub const FINAL_FACTOR: f64 = 1.0 / 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    /// Fraction of steps spent warming up.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
}

fn default_warmup() -> f64 {
    0.1
}

impl ScheduleConfig {
    pub fn new(max_lr: f64) -> Self {
        ScheduleConfig { max_lr, warmup: default_warmup() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) || !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "schedule needs max_lr > 0 and warmup in [0, 1), got {} and {}",
                self.max_lr, self.warmup
            )));
        }
        Ok(())
    }

    /// Index of the step that runs at exactly `max_lr`.
    pub fn warmup_end(&self, total: usize) -> usize {
        ((self.warmup * total as f64).round() as usize).min(total)
    }
}

/// Rate for `step` of `total` (clamped to `total`).
pub fn lr_at(step: usize, total: usize, cfg: &ScheduleConfig) -> f64 {
    let step = step.min(total);
    let warm = cfg.warmup_end(total);
    if step < warm {
        let t = step as f64 / warm as f64;
        return cfg.max_lr * (WARMUP_START_FACTOR + (1.0 - WARMUP_START_FACTOR) * t);
    }
    let span = total - warm;
    if step == warm || span == 0 {
        return cfg.max_lr;
    }
    let t = (step - warm) as f64 / span as f64;
    let low = cfg.max_lr * FINAL_FACTOR;
    low + (cfg.max_lr - low) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn peak_start_and_end() {
        let cfg = ScheduleConfig::new(TRSNET_MAX_LR);
        let total = 300;
        assert_eq!(cfg.warmup_end(total), 30);
        assert_eq!(lr_at(30, total, &cfg), 1e-3);
        assert!((lr_at(0, total, &cfg) - 1e-3 / 25.0).abs() < 1e-15);
        assert!((lr_at(total, total, &cfg) - 1e-5).abs() < 1e-15);
        let d = ScheduleConfig::new(DMGFORMER_MAX_LR);
        assert_eq!(lr_at(d.warmup_end(50), 50, &d), 2e-4);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(ScheduleConfig::new(0.0).validate().is_err());
        assert!(ScheduleConfig { max_lr: 1e-3, warmup: 1.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn monotone_after_warmup(total in 1usize..2000, max_lr in 1e-5f64..1.0) {
            let cfg = ScheduleConfig::new(max_lr);
            let w = cfg.warmup_end(total);
            for s in 0..w {
                prop_assert!(lr_at(s, total, &cfg) < lr_at(s + 1, total, &cfg));
            }
            for s in w..total {
                prop_assert!(lr_at(s + 1, total, &cfg) <= lr_at(s, total, &cfg));
            }
            for s in 0..=total {
                prop_assert!(lr_at(s, total, &cfg) <= max_lr);
            }
        }
    }
}
