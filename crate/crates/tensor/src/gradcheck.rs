//! Central finite differences, used as an independent check on `backward`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `∂f/∂x` by central differences with step `h`.
pub fn finite_difference<S: Scalar>(x: &Tensor<S>, h: S, mut f: impl FnMut(&Tensor<S>) -> S) -> Tensor<S> {
    let mut probe = x.clone();
    let two_h = h + h;
    let grads = (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::new(x.shape().to_vec(), grads).expect("same shape")
}

/// Max over entries of `|a − n| / max(|a|, |n|, floor)`.
///
/// `floor` turns the comparison absolute for entries whose gradient is
/// itself near zero, where a relative measure is dominated by rounding.
pub fn max_relative_error<S: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<S>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Fixed projection weights so a tensor-valued output becomes a scalar loss
/// with non-degenerate gradients.
fn projection<S: Scalar>(i: usize) -> S {
    S::lit((0.37 * i as f64 + 0.11).cos() + 0.05)
}

fn projected_loss<S: Scalar>(
    inputs: &[Tensor<S>],
    build: &impl Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
    trainable: bool,
) -> Result<(Graph<S>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone(), trainable)).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::from_fn(shape, projection))?;
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted)?;
    Ok((g, vars, loss))
}

/// Compares `backward` against central differences for every input of the
/// graph produced by `build`; returns the worst [`max_relative_error`].
pub fn check_graph<S: Scalar>(
    inputs: &[Tensor<S>],
    h: S,
    floor: f64,
    build: impl Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let (mut g, vars, loss) = projected_loss(inputs, &build, true)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(v);
        let mut scratch = inputs.to_vec();
        let numeric = finite_difference(&inputs[k], h, |probe| {
            scratch[k] = probe.clone();
            let (g, _, loss) = projected_loss(&scratch, &build, false).expect("graph rebuilds");
            g.value(loss).data()[0]
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
    }
    Ok(worst)
}
