use crate::error::{Result, TensorError};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S: Scalar = f64> {
    pub momentum: S,
    velocity: Params<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: S) -> Self {
        Self { momentum, velocity: Params::new() }
    }

    pub fn with_velocity(momentum: S, velocity: Params<S>) -> Self {
        Self { momentum, velocity }
    }

    pub fn velocity(&self) -> &Params<S> {
        &self.velocity
    }

    /// Parameters absent from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut Params<S>, grads: &Params<S>, lr: S, weight_decay: S) -> Result<()> {
        for name in grads.names() {
            if !params.contains(name) {
                return Err(TensorError::UnknownParam(name.clone()));
            }
        }
        for (name, p) in params.iter_mut() {
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
            }
            let v = self.velocity.get_mut(name)?;
            let g = grads.get(name).ok();
            if let Some(g) = g {
                p.expect_same_shape("sgd_step", g)?;
            }
            p.expect_same_shape("sgd_step", v)?;
            let gd = g.map(|g| g.data());
            for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let grad = gd.map_or(S::zero(), |d| d[i]);
                *vv = self.momentum * *vv + grad + weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = single(1.5);
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &single(3.0), 0.0, 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.0);
        opt.step(&mut p, &single(0.5), 0.1, 0.0).unwrap();
        assert_eq!(p.get("x").unwrap().item().unwrap(), 0.95);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = x², grad 2x; lr 0.1 contracts by 0.8 per step.
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.0);
        for _ in 0..100 {
            let x = p.get("x").unwrap().item().unwrap();
            opt.step(&mut p, &single(2.0 * x), 0.1, 0.0).unwrap();
        }
        assert!(p.get("x").unwrap().item().unwrap().abs() < 1e-8);
    }

    #[test]
    fn unknown_gradient_name_is_rejected() {
        let mut p = single(1.0);
        let mut g = Params::new();
        g.insert("y", Tensor::scalar(1.0));
        assert!(Sgd::new(0.9).step(&mut p, &g, 0.1, 0.0).is_err());
    }
}
