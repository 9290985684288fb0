use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    #[default]
    Cosine,
    Constant,
}

/// Linear warmup from 0 to `base`, then cosine interpolation to `min`
/// (or a constant `base`). `min > base` gives an increasing cosine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base: f64,
    pub min: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub shape: ScheduleShape,
}

impl ScheduleSpec {
    pub fn constant(value: f64, total_steps: usize) -> Self {
        Self { base: value, min: value, warmup_steps: 0, total_steps, shape: ScheduleShape::Constant }
    }

    pub fn cosine(base: f64, min: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self { base, min, warmup_steps, total_steps, shape: ScheduleShape::Cosine }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(TensorError::invalid(
                "schedule",
                format!("warmup {} exceeds total {}", self.warmup_steps, self.total_steps),
            ));
        }
        if !self.base.is_finite() || !self.min.is_finite() {
            return Err(TensorError::invalid("schedule", "endpoints must be finite"));
        }
        Ok(())
    }

    pub fn value(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(TensorError::StepOutOfRange { step, total: self.total_steps });
        }
        if step < self.warmup_steps {
            return Ok(self.base * step as f64 / self.warmup_steps as f64);
        }
        match self.shape {
            ScheduleShape::Constant => Ok(self.base),
            ScheduleShape::Cosine => {
                let span = self.total_steps - self.warmup_steps;
                if span == 0 {
                    return Ok(self.min);
                }
                let progress = (step - self.warmup_steps) as f64 / span as f64;
                Ok(self.min + 0.5 * (self.base - self.min) * (1.0 + (PI * progress).cos()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = ScheduleSpec::cosine(0.5, 0.001, 10, 110);
        assert_eq!(s.value(0).unwrap(), 0.0);
        assert_eq!(s.value(5).unwrap(), 0.25);
        assert_eq!(s.value(10).unwrap(), 0.5);
        assert!((s.value(110).unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn increasing_cosine_midpoint_is_average() {
        let s = ScheduleSpec::cosine(0.04, 0.4, 0, 100);
        assert!((s.value(50).unwrap() - 0.22).abs() < 1e-12);
        assert!(s.value(25).unwrap() < s.value(75).unwrap());
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let s = ScheduleSpec::cosine(1.0, 0.0, 0, 10);
        assert!(matches!(s.value(11), Err(TensorError::StepOutOfRange { .. })));
        assert!(ScheduleSpec::cosine(1.0, 0.0, 11, 10).value(0).is_err());
    }

    #[test]
    fn constant_shape_holds_base_after_warmup() {
        let s = ScheduleSpec { shape: ScheduleShape::Constant, ..ScheduleSpec::cosine(2.0, 0.0, 4, 8) };
        assert_eq!(s.value(2).unwrap(), 1.0);
        assert_eq!(s.value(8).unwrap(), 2.0);
    }
}
