use serde::{Deserialize, Serialize};
use sslab_tensor::{Graph, Scalar, Tensor, Var};

use super::{aggregate_pairs, sinkhorn, HeadError, LossBalance, PairLosses};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwavConfig {
    pub n_prototypes: usize,
    pub temperature: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for SwavConfig {
    fn default() -> Self {
        Self { n_prototypes: 32, temperature: 0.1, sinkhorn_eps: 0.05, sinkhorn_iters: 3 }
    }
}

/// Rescales every row of a `[C, d]` matrix to unit length.
pub fn normalize_rows<S: Scalar>(t: &mut Tensor<S>) {
    let d = *t.shape().last().unwrap_or(&1);
    for row in t.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if n > S::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Swapped cluster-assignment prediction.
///
/// `embeddings` are per-view `[B, d]` unit vectors, `prototypes` is `[C, d]`.
/// Codes of each global view come from Sinkhorn on its (detached) prototype
/// scores unless `codes` supplies them. Returns the losses and the codes used.
pub fn swav_loss<S: Scalar>(
    g: &mut Graph<S>,
    embeddings: &[Var],
    n_g: usize,
    prototypes: Var,
    cfg: &SwavConfig,
    balance: &LossBalance,
    codes: Option<&[Tensor<S>]>,
) -> Result<(PairLosses, Vec<Tensor<S>>), HeadError> {
    if n_g == 0 || embeddings.len() < n_g {
        return Err(HeadError::Config(format!("{n_g} global views of {}", embeddings.len())));
    }
    let proto_t = g.transpose(prototypes)?;
    let scores = embeddings.iter().map(|&z| g.matmul(z, proto_t)).collect::<Result<Vec<_>, _>>()?;
    let codes: Vec<Tensor<S>> = match codes {
        Some(c) if c.len() == n_g => c.to_vec(),
        Some(c) => return Err(HeadError::Config(format!("{} codes for {n_g} global views", c.len()))),
        None => scores[..n_g]
            .iter()
            .map(|&s| sinkhorn(g.value(s), S::lit(cfg.sinkhorn_eps), cfg.sinkhorn_iters))
            .collect::<Result<_, _>>()?,
    };
    let code_vars = codes.iter().map(|c| g.constant(c.clone())).collect::<Result<Vec<_>, _>>()?;
    let temp = S::lit(cfg.temperature);
    let log_probs = scores.iter().map(|&s| g.log_softmax(s, 1, temp)).collect::<Result<Vec<_>, _>>()?;
    let losses = aggregate_pairs(g, n_g, embeddings.len(), balance, |g, i, v| {
        Ok(g.cross_entropy_soft(code_vars[i], log_probs[v])?)
    })?;
    Ok((losses, codes))
}
