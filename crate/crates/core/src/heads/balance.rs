use serde::{Deserialize, Serialize};
use sslab_tensor::{Graph, Scalar, Var};

use super::HeadError;
use crate::viewgeom::PairCounts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    /// `(l_g + l_l) / (p_gg + p_gl)`.
    Legacy,
    /// `α·l_g/p_gg + (1−α)·l_l/p_gl`.
    #[default]
    Rebalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBalance {
    #[serde(default)]
    pub mode: BalanceMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.4
}

impl Default for LossBalance {
    fn default() -> Self {
        Self { mode: BalanceMode::Rebalanced, alpha: default_alpha() }
    }
}

impl LossBalance {
    pub fn legacy() -> Self {
        Self { mode: BalanceMode::Legacy, alpha: f64::NAN }
    }

    pub fn rebalanced(alpha: f64) -> Self {
        Self { mode: BalanceMode::Rebalanced, alpha }
    }

    /// The α under which the re-weighted total reproduces the legacy one.
    pub fn legacy_alpha(counts: &PairCounts) -> f64 {
        counts.p_gg as f64 / counts.total() as f64
    }

    /// `(w_g, w_l)` with `total = w_g·l_g + w_l·l_l`.
    ///
    /// In re-balanced mode a term with zero pairs is dropped and the other
    /// term takes weight 1.
    pub fn weights(&self, counts: &PairCounts) -> Result<(f64, f64), HeadError> {
        if counts.total() == 0 {
            return Err(HeadError::NoPairs);
        }
        match self.mode {
            BalanceMode::Legacy => {
                let w = 1.0 / counts.total() as f64;
                Ok((w, w))
            }
            BalanceMode::Rebalanced => {
                if !(0.0..=1.0).contains(&self.alpha) {
                    return Err(HeadError::Alpha(self.alpha));
                }
                Ok(match (counts.p_gg, counts.p_gl) {
                    (0, p_gl) => (0.0, 1.0 / p_gl as f64),
                    (p_gg, 0) => (1.0 / p_gg as f64, 0.0),
                    (p_gg, p_gl) => (self.alpha / p_gg as f64, (1.0 - self.alpha) / p_gl as f64),
                })
            }
        }
    }

    pub fn total(&self, l_g: f64, l_l: f64, counts: &PairCounts) -> Result<f64, HeadError> {
        let (w_g, w_l) = self.weights(counts)?;
        Ok(w_g * l_g + w_l * l_l)
    }
}

pub fn rebalanced_total(
    l_g: f64,
    l_l: f64,
    counts: &PairCounts,
    alpha: f64,
    mode: BalanceMode,
) -> Result<f64, HeadError> {
    LossBalance { mode, alpha }.total(l_g, l_l, counts)
}

/// Graph nodes of one aggregated multi-view loss.
#[derive(Clone, Copy, Debug)]
pub struct PairLosses {
    pub l_g: Var,
    pub l_l: Var,
    pub total: Var,
    pub counts: PairCounts,
}

impl PairLosses {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        let val = |v: Var| g.value(v).data()[0].as_f64();
        LossBreakdown { l_g: val(self.l_g), l_l: val(self.l_l), total: val(self.total), counts: self.counts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_l: f64,
    pub total: f64,
    pub counts: PairCounts,
}

#[cfg(test)]
mod tests {
    use super::*;

    const COUNTS: PairCounts = PairCounts { p_gg: 2, p_gl: 12 };

    #[test]
    fn legacy_arithmetic() {
        let t = rebalanced_total(3.0, 12.0, &COUNTS, f64::NAN, BalanceMode::Legacy).unwrap();
        assert!((t - 15.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn legacy_alpha_reproduces_legacy_total() {
        let alpha = LossBalance::legacy_alpha(&COUNTS);
        assert!((alpha - 0.143).abs() < 5e-4);
        let t = rebalanced_total(3.0, 12.0, &COUNTS, alpha, BalanceMode::Rebalanced).unwrap();
        assert!((t - 15.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn reweighted_arithmetic() {
        let t = rebalanced_total(3.0, 12.0, &COUNTS, 0.4, BalanceMode::Rebalanced).unwrap();
        assert!((t - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_count_terms_are_dropped() {
        let only_local = PairCounts { p_gg: 0, p_gl: 4 };
        assert_eq!(rebalanced_total(9.0, 2.0, &only_local, 0.4, BalanceMode::Rebalanced).unwrap(), 0.5);
        let only_global = PairCounts { p_gg: 6, p_gl: 0 };
        assert_eq!(rebalanced_total(3.0, 9.0, &only_global, 0.4, BalanceMode::Rebalanced).unwrap(), 0.5);
        let none = PairCounts { p_gg: 0, p_gl: 0 };
        assert!(matches!(rebalanced_total(1.0, 1.0, &none, 0.4, BalanceMode::Legacy), Err(HeadError::NoPairs)));
        assert!(matches!(rebalanced_total(1.0, 1.0, &COUNTS, 1.5, BalanceMode::Rebalanced), Err(HeadError::Alpha(_))));
    }
}
