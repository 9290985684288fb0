use sslab_tensor::{Graph, Scalar, Tensor, Var};

use super::{aggregate_pairs, HeadError, LossBalance, PairLosses};

const UNIT_TOL: f64 = 1e-6;

/// FIFO ring buffer of unit-norm negative keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoQueue<S: Scalar = f64> {
    buffer: Tensor<S>,
    cursor: usize,
    len: usize,
    pub temperature: S,
}

impl<S: Scalar> MocoQueue<S> {
    pub fn new(capacity: usize, dim: usize, temperature: S) -> Result<Self, HeadError> {
        if capacity == 0 || dim == 0 || temperature <= S::zero() {
            return Err(HeadError::Config(format!("queue {capacity}x{dim} at temperature {temperature}")));
        }
        Ok(Self { buffer: Tensor::zeros([capacity, dim]), cursor: 0, len: 0, temperature })
    }

    /// Rebuilds a queue from saved state.
    pub fn from_parts(buffer: Tensor<S>, cursor: usize, len: usize, temperature: S) -> Result<Self, HeadError> {
        if buffer.rank() != 2 || cursor >= buffer.shape()[0].max(1) || len > buffer.shape()[0] {
            return Err(HeadError::Config("inconsistent queue state".into()));
        }
        Ok(Self { buffer, cursor, len, temperature })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.buffer.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Raw storage, including unfilled rows.
    pub fn buffer(&self) -> &Tensor<S> {
        &self.buffer
    }

    /// Filled rows `[len, dim]` in storage order.
    pub fn keys(&self) -> Tensor<S> {
        let d = self.dim();
        Tensor::new([self.len, d], self.buffer.data()[..self.len * d].to_vec()).expect("prefix of buffer")
    }

    /// Writes `keys: [n, dim]` at the cursor, overwriting the oldest rows.
    pub fn push(&mut self, keys: &Tensor<S>) -> Result<(), HeadError> {
        let d = self.dim();
        if keys.rank() != 2 || keys.shape()[1] != d {
            return Err(HeadError::Config(format!("keys {:?} vs queue dim {d}", keys.shape())));
        }
        let n = keys.shape()[0];
        if n > self.capacity() {
            return Err(HeadError::QueueOverflow { batch: n, capacity: self.capacity() });
        }
        for r in 0..n {
            let norm = keys.row(r).iter().map(|&v| v * v).sum::<S>().sqrt().as_f64();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(HeadError::NotNormalized { row: r, norm });
            }
        }
        for r in 0..n {
            let dst = self.cursor * d;
            self.buffer.data_mut()[dst..dst + d].copy_from_slice(keys.row(r));
            self.cursor = (self.cursor + 1) % self.capacity();
        }
        self.len = (self.len + n).min(self.capacity());
        Ok(())
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `−log(exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σⱼ exp(q·nⱼ/τ)))` over the queued negatives.
pub fn info_nce<S: Scalar>(query: &[S], positive: &[S], queue: &MocoQueue<S>) -> S {
    let tau = queue.temperature;
    let pos = dot(query, positive) / tau;
    let negs: Vec<S> = (0..queue.len()).map(|j| dot(query, queue.buffer.row(j)) / tau).collect();
    let max = negs.iter().copied().fold(pos, S::max);
    let z: S = (pos - max).exp() + negs.iter().map(|&v| (v - max).exp()).sum::<S>();
    z.ln() + max - pos
}

/// Batch mean of [`info_nce`] as a graph node; `keys` are detached.
pub fn info_nce_batch<S: Scalar>(
    g: &mut Graph<S>,
    queries: Var,
    keys: Var,
    queue: &MocoQueue<S>,
) -> Result<Var, HeadError> {
    let keys = g.detach(keys)?;
    let b = g.value(queries).shape()[0];
    let prod = g.mul(queries, keys)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.reshape(pos, [b, 1])?;
    let logits = if queue.is_empty() {
        pos
    } else {
        let neg_t = g.constant(queue.keys())?;
        let neg_t = g.transpose(neg_t)?;
        let neg = g.matmul(queries, neg_t)?;
        g.concat(&[pos, neg], 1)?
    };
    let width = queue.len() + 1;
    let logp = g.log_softmax(logits, 1, queue.temperature)?;
    let target = g.constant(Tensor::from_fn([b, width], |i| if i % width == 0 { S::one() } else { S::zero() }))?;
    Ok(g.cross_entropy_soft(target, logp)?)
}

/// Contrastive multi-view loss: queries from every view, positive keys from
/// each global view of the momentum encoder, negatives from the queue.
pub fn moco_loss<S: Scalar>(
    g: &mut Graph<S>,
    queries: &[Var],
    keys: &[Var],
    queue: &MocoQueue<S>,
    balance: &LossBalance,
) -> Result<PairLosses, HeadError> {
    let n_g = keys.len();
    if n_g == 0 || queries.len() < n_g {
        return Err(HeadError::Config(format!("{n_g} key views vs {} query views", queries.len())));
    }
    aggregate_pairs(g, n_g, queries.len(), balance, |g, i, v| info_nce_batch(g, queries[v], keys[i], queue))
}
