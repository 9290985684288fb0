use rand::Rng;
use serde::{Deserialize, Serialize};
use sslab_tensor::{Scalar, Tensor};

use super::{invalid, DataError};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Intensity augmentations, applied in the order flip, jitter, grayscale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness factor drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 − c, 1 + c]`.
    pub contrast: f64,
    pub gray_p: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self { flip_p: 0.5, jitter_p: 0.8, brightness: 0.4, contrast: 0.4, gray_p: 0.2 }
    }
}

impl AugConfig {
    pub fn none() -> Self {
        Self { flip_p: 0.0, jitter_p: 0.0, brightness: 0.0, contrast: 0.0, gray_p: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let probs = [self.flip_p, self.jitter_p, self.gray_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(format!("augmentation probabilities {probs:?}")));
        }
        if !(0.0..=1.0).contains(&self.brightness) || !(0.0..=1.0).contains(&self.contrast) {
            return Err(invalid("jitter strengths must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn flip_horizontal<S: Scalar>(t: &mut Tensor<S>) {
    let w = t.shape()[2];
    for row in t.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

fn luma<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let plane = t.numel() / 3;
    let d = t.data();
    (0..plane)
        .map(|i| S::lit(LUMA[0]) * d[i] + S::lit(LUMA[1]) * d[plane + i] + S::lit(LUMA[2]) * d[2 * plane + i])
        .collect()
}

/// Augments a `[3, h, w]` view with values in [0, 1].
///
/// Every random draw happens whether or not the corresponding transform
/// fires, so the stream position after a call is independent of the outcome.
pub fn augment<S: Scalar, R: Rng + ?Sized>(t: &mut Tensor<S>, cfg: &AugConfig, rng: &mut R) -> Result<(), DataError> {
    cfg.validate()?;
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(invalid(format!("augment expects [3, h, w], got {:?}", t.shape())));
    }
    let flip = rng.random::<f64>() < cfg.flip_p;
    let jitter = rng.random::<f64>() < cfg.jitter_p;
    let b = 1.0 + cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
    let c = 1.0 + cfg.contrast * (2.0 * rng.random::<f64>() - 1.0);
    let gray = rng.random::<f64>() < cfg.gray_p;

    if flip {
        flip_horizontal(t);
    }
    if jitter {
        let b = S::lit(b);
        t.data_mut().iter_mut().for_each(|v| *v = (*v * b).min(S::one()).max(S::zero()));
        let y = luma(t);
        let mean = y.iter().copied().sum::<S>() / S::lit(y.len() as f64);
        let c = S::lit(c);
        t.data_mut().iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).min(S::one()).max(S::zero()));
    }
    if gray {
        let y = luma(t);
        for chunk in t.data_mut().chunks_mut(y.len()) {
            chunk.copy_from_slice(&y);
        }
    }
    Ok(())
}
