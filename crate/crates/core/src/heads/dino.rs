use sslab_tensor::{Graph, Scalar, Tensor, Var};

use super::{aggregate_pairs, HeadError, LossBalance, PairLosses};

/// Centering and temperature state of the feature-matching head.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoHeadState<S: Scalar = f64> {
    pub center: Tensor<S>,
    pub teacher_temp: S,
    pub student_temp: S,
    pub center_momentum: S,
}

impl<S: Scalar> DinoHeadState<S> {
    pub fn new(out_dim: usize, teacher_temp: S, student_temp: S, center_momentum: S) -> Result<Self, HeadError> {
        if teacher_temp <= S::zero() || student_temp <= S::zero() {
            return Err(HeadError::Config("temperatures must be positive".into()));
        }
        Ok(Self { center: Tensor::zeros([out_dim]), teacher_temp, student_temp, center_momentum })
    }

    /// `center ← m·center + (1−m)·mean_rows(teacher)` for `teacher: [N, K]`.
    pub fn update_center(&mut self, teacher: &Tensor<S>) -> Result<(), HeadError> {
        let k = self.center.numel();
        if teacher.rank() != 2 || teacher.shape()[1] != k || teacher.shape()[0] == 0 {
            return Err(HeadError::Config(format!("teacher batch {:?} vs center [{k}]", teacher.shape())));
        }
        let rows = teacher.shape()[0];
        let mut mean = vec![S::zero(); k];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(teacher.row(r)) {
                *m += v;
            }
        }
        let m = self.center_momentum;
        let inv = S::one() / S::lit(rows as f64);
        for (c, s) in self.center.data_mut().iter_mut().zip(mean) {
            *c = m * *c + (S::one() - m) * s * inv;
        }
        Ok(())
    }
}

/// Cross-entropy between the centered, sharpened teacher distribution of
/// each global view and the student distribution of every other view.
///
/// `teacher_logits` and `center` are detached here, so no gradient reaches
/// them whatever their `requires_grad` flag.
pub fn dino_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: &[Var],
    teacher_logits: &[Var],
    center: Var,
    head: &DinoHeadState<S>,
    balance: &LossBalance,
) -> Result<PairLosses, HeadError> {
    let n_g = teacher_logits.len();
    if n_g == 0 || student_logits.len() < n_g {
        return Err(HeadError::Config(format!("{} teacher views vs {} student views", n_g, student_logits.len())));
    }
    let center = g.detach(center)?;
    let targets = teacher_logits
        .iter()
        .map(|&t| {
            let t = g.detach(t)?;
            let centered = g.sub(t, center)?;
            g.softmax(centered, 1, head.teacher_temp)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let log_probs =
        student_logits.iter().map(|&s| g.log_softmax(s, 1, head.student_temp)).collect::<Result<Vec<_>, _>>()?;
    aggregate_pairs(
        g,
        n_g,
        student_logits.len(),
        balance,
        |g, i, v| Ok(g.cross_entropy_soft(targets[i], log_probs[v])?),
    )
}
