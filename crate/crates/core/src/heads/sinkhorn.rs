use sslab_tensor::{Scalar, Tensor};

use super::HeadError;

/// Balanced soft assignment of `B` samples to `C` clusters.
///
/// Starts from `exp(scores/eps)` (after subtracting the global max), then
/// alternates column normalization (each column sums to `1/C`) and row
/// normalization (each row sums to `1/B`) `iters` times; rows of the result
/// are rescaled to sum to 1.
pub fn sinkhorn<S: Scalar>(scores: &Tensor<S>, eps: S, iters: usize) -> Result<Tensor<S>, HeadError> {
    if scores.rank() != 2 {
        return Err(HeadError::Config(format!("sinkhorn expects [B, C], got {:?}", scores.shape())));
    }
    if eps <= S::zero() {
        return Err(HeadError::Config("sinkhorn eps must be positive".into()));
    }
    if !scores.is_finite() {
        return Err(HeadError::Tensor(sslab_tensor::TensorError::NonFinite { op: "sinkhorn" }));
    }
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    let max = scores.data().iter().copied().fold(S::neg_infinity(), S::max);
    let mut q: Vec<S> = scores.data().iter().map(|&s| ((s - max) / eps).exp()).collect();
    let total: S = q.iter().copied().sum();
    if total <= S::zero() {
        return Err(HeadError::Underflow);
    }
    q.iter_mut().for_each(|v| *v /= total);
    let (inv_b, inv_c) = (S::one() / S::lit(b as f64), S::one() / S::lit(c as f64));
    for _ in 0..iters {
        for j in 0..c {
            let sum: S = (0..b).map(|i| q[i * c + j]).sum();
            if sum <= S::zero() {
                return Err(HeadError::Underflow);
            }
            let f = inv_c / sum;
            (0..b).for_each(|i| q[i * c + j] *= f);
        }
        for row in q.chunks_mut(c) {
            let sum: S = row.iter().copied().sum();
            if sum <= S::zero() {
                return Err(HeadError::Underflow);
            }
            let f = inv_b / sum;
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    for row in q.chunks_mut(c) {
        let sum: S = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(Tensor::new([b, c], q)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_give_uniform_codes() {
        let q = sinkhorn(&Tensor::<f64>::full([4, 5], 0.3), 0.05, 3).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn balanced_input_is_a_fixed_point() {
        // exp(scores/eps) ∝ [[2,1],[1,2]]: equal row and column sums
        let eps = 0.5;
        let s = Tensor::new([2, 2], vec![eps * 2f64.ln(), 0.0, 0.0, eps * 2f64.ln()]).unwrap();
        let one = sinkhorn(&s, eps, 1).unwrap();
        let many = sinkhorn(&s, eps, 20).unwrap();
        assert!(one.max_abs_diff(&many).unwrap() < 1e-12);
        assert!((one.data()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let s = Tensor::new([2, 2], vec![1000.0, 999.0, 998.0, 1000.0]).unwrap();
        let q = sinkhorn(&s, 1.0, 5).unwrap();
        assert!(q.is_finite());
    }
}
