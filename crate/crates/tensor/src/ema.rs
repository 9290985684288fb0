use crate::error::{Result, TensorError};
use crate::params::Params;
use crate::scalar::Scalar;

/// Exponential moving average of a parameter set (the teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<S: Scalar = f64> {
    pub params: Params<S>,
    pub momentum: S,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(params: Params<S>, momentum: S) -> Self {
        Self { params, momentum }
    }

    /// `teacher ← m·teacher + (1−m)·student`.
    pub fn update(&mut self, student: &Params<S>) -> Result<()> {
        let m = self.momentum;
        if !(S::zero()..=S::one()).contains(&m) {
            return Err(TensorError::invalid("ema_update", format!("momentum {m} outside [0, 1]")));
        }
        for (name, teacher) in self.params.iter_mut() {
            let s = student.get(name)?;
            teacher.expect_same_shape("ema_update", s)?;
            for (t, &v) in teacher.data_mut().iter_mut().zip(s.data()) {
                *t = m * *t + (S::one() - m) * v;
            }
        }
        Ok(())
    }
}
