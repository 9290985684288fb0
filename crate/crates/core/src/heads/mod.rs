//! Self-supervised objectives over multi-view batches.
//!
//! All three losses share one pairing rule: for every global view `gᵢ` acting
//! as the target and every other view `v ≠ gᵢ` acting as the prediction, a
//! pair loss `SL(gᵢ, v)` is computed. Pairs whose `v` is global sum into
//! `l_g`, pairs whose `v` is local sum into `l_l`, and [`LossBalance`] turns
//! the two sums into the scalar that is optimized.
//!
//! View lists are ordered globals first, then locals. Each entry is a
//! `[batch, dim]` node; per-pair losses are batch means.

mod balance;
mod dino;
mod moco;
mod sinkhorn;
mod swav;

pub use balance::{rebalanced_total, BalanceMode, LossBalance, LossBreakdown, PairLosses};
pub use dino::{dino_loss, DinoHeadState};
pub use moco::{info_nce, info_nce_batch, moco_loss, MocoQueue};
pub use sinkhorn::sinkhorn;
pub use swav::{normalize_rows, swav_loss, SwavConfig};

use sslab_tensor::{Graph, Scalar, TensorError, Var};
use thiserror::Error;

use crate::viewgeom::PairCounts;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("both pair counts are zero")]
    NoPairs,
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("{0}")]
    Config(String),
    #[error("key row {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("batch of {batch} keys exceeds queue capacity {capacity}")]
    QueueOverflow { batch: usize, capacity: usize },
    #[error("sinkhorn normalizer vanished")]
    Underflow,
}

/// Enumerates the (global target, other view) pairs, sums pair losses into
/// `l_g`/`l_l` in a fixed order and aggregates them with `balance`.
pub(crate) fn aggregate_pairs<S: Scalar>(
    g: &mut Graph<S>,
    n_g: usize,
    n_views: usize,
    balance: &LossBalance,
    mut pair_loss: impl FnMut(&mut Graph<S>, usize, usize) -> Result<Var, HeadError>,
) -> Result<PairLosses, HeadError> {
    let counts = PairCounts::from_views(n_g, n_views - n_g);
    let (w_g, w_l) = balance.weights(&counts)?;
    let mut l_g: Option<Var> = None;
    let mut l_l: Option<Var> = None;
    for i in 0..n_g {
        for v in (0..n_views).filter(|&v| v != i) {
            let sl = pair_loss(g, i, v)?;
            let slot = if v < n_g { &mut l_g } else { &mut l_l };
            *slot = Some(match *slot {
                Some(acc) => g.add(acc, sl)?,
                None => sl,
            });
        }
    }
    let zero = |g: &mut Graph<S>| g.constant(sslab_tensor::Tensor::scalar(S::zero()));
    let l_g = match l_g {
        Some(v) => v,
        None => zero(g)?,
    };
    let l_l = match l_l {
        Some(v) => v,
        None => zero(g)?,
    };
    let a = g.scale(l_g, S::lit(w_g))?;
    let b = g.scale(l_l, S::lit(w_l))?;
    let total = g.add(a, b)?;
    Ok(PairLosses { l_g, l_l, total, counts })
}
