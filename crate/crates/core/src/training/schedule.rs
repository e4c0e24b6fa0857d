use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrPolicy {
    /// Linear ramp to the peak over the first `warmup_fraction` of steps,
    /// then linear decay to zero at the last step.
    LinearWarmupDecay { warmup_fraction: f64 },
    /// Fixed learning rate; the peak is ignored.
    Constant { value: f64 },
}

impl LrPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            LrPolicy::LinearWarmupDecay { .. } => "decay",
            LrPolicy::Constant { .. } => "constant",
        }
    }
}

/// Number of warmup steps, `⌈warmup_fraction × total_steps⌉`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps)
}

/// Learning rate for `step` in `0..total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, policy: &LrPolicy) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule of {total_steps}")));
    }
    Ok(match *policy {
        LrPolicy::Constant { value } => value,
        LrPolicy::LinearWarmupDecay { warmup_fraction } => {
            let w = warmup_steps(total_steps, warmup_fraction);
            if step < w {
                peak * (step + 1) as f64 / w as f64
            } else {
                peak * (total_steps - step) as f64 / (total_steps - w) as f64
            }
        }
    })
}
