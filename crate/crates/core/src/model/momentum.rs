use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Parameterized, Real};

/// `target ← m·target + (1−m)·online`, elementwise.
pub fn momentum_update<T: Real, P: Parameterized<T>>(target: &mut P, online: &P, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("momentum {m} outside [0, 1]")));
    }
    let src = online.params();
    let dst = target.params_mut();
    if src.len() != dst.len() || dst.iter().zip(&src).any(|(d, s)| d.shape() != s.shape()) {
        return Err(Error::InvalidState(
            "momentum and online parameters are not congruent".into(),
        ));
    }
    let (a, b) = (T::lit(m), T::lit(1.0 - m));
    for (d, s) in dst.into_iter().zip(src) {
        for (x, y) in d.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * *y;
        }
    }
    Ok(())
}

/// Linear ramp of the momentum coefficient over the first part of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_fraction: f64,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self {
            start: 0.996,
            end: 0.999,
            ramp_fraction: 0.2,
        }
    }
}

impl MomentumSchedule {
    pub fn at(&self, step: u64, total_steps: u64) -> Result<f64> {
        if total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        if step > total_steps {
            return Err(invalid(format!("step {step} beyond total_steps {total_steps}")));
        }
        let ramp = self.ramp_fraction * total_steps as f64;
        let progress = if ramp > 0.0 { (step as f64 / ramp).min(1.0) } else { 1.0 };
        Ok(self.start + (self.end - self.start) * progress)
    }
}

/// Momentum at `step` with the default 0.996 → 0.999 ramp over 20% of training.
pub fn momentum_schedule(step: u64, total_steps: u64) -> Result<f64> {
    MomentumSchedule::default().at(step, total_steps)
}
