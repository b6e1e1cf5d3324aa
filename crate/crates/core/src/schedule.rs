//! Regularization-strength schedules indexed by optimizer step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Exponential,
}

/// `Constant` returns `start_value` forever. `Exponential` interpolates
/// geometrically from `start_value` at step 0 to `end_value` at step
/// `horizon` and stays there afterwards. In configuration files a horizon of
/// 0 (or none) stands for "the whole run" and is filled in when the run is
/// resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule {
    pub kind: ScheduleKind,
    pub start_value: f64,
    #[serde(default)]
    pub end_value: f64,
    #[serde(default)]
    pub horizon: u64,
}

impl LambdaSchedule {
    pub fn constant(value: f64) -> Self {
        LambdaSchedule {
            kind: ScheduleKind::Constant,
            start_value: value,
            end_value: value,
            horizon: 1,
        }
    }

    pub fn exponential(start_value: f64, end_value: f64, horizon: u64) -> Result<Self> {
        let s = LambdaSchedule {
            kind: ScheduleKind::Exponential,
            start_value,
            end_value,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |v: f64| v.is_finite() && v >= 0.0;
        match self.kind {
            ScheduleKind::Constant => {
                if !finite_non_negative(self.start_value) {
                    return Err(Error::Parameter(format!(
                        "constant schedule value must be finite and >= 0, got {}",
                        self.start_value
                    )));
                }
            }
            ScheduleKind::Exponential => {
                let positive = |v: f64| v.is_finite() && v > 0.0;
                if !positive(self.start_value) || !positive(self.end_value) {
                    return Err(Error::Parameter(format!(
                        "exponential schedule needs positive endpoints, got {} -> {}",
                        self.start_value, self.end_value
                    )));
                }
                if self.horizon == 0 {
                    return Err(Error::Parameter("schedule horizon must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn value_at(&self, step: u64) -> Result<f64> {
        lambda_at(self, step)
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, step: u64) -> Result<f64> {
    schedule.validate()?;
    Ok(match schedule.kind {
        ScheduleKind::Constant => schedule.start_value,
        ScheduleKind::Exponential => {
            if step == 0 {
                schedule.start_value
            } else if step >= schedule.horizon {
                schedule.end_value
            } else {
                let frac = step as f64 / schedule.horizon as f64;
                schedule.start_value * (schedule.end_value / schedule.start_value).powf(frac)
            }
        }
    })
}
