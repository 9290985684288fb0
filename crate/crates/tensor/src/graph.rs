//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2d { x: Var, geom: PoolGeom },
    Softmax { x: Var, axis: usize, temp: S },
    LogSoftmax { x: Var, axis: usize, temp: S },
    L2Normalize { x: Var, axis: usize, eps: S },
    LayerNorm { x: Var, eps: S },
    CrossEntropySoft { target: Var, logp: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Detach,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    checked: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn gelu<S: Scalar>(x: S) -> S {
    let inner = S::lit(GELU_K) * (x + S::lit(GELU_C) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let inner = S::lit(GELU_K) * (x + S::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = S::lit(GELU_K) * (S::one() + S::lit(3.0 * GELU_C) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

/// Sums `g` down to its trailing `width` elements (inverse of suffix broadcast).
fn reduce_to_suffix<S: Scalar>(g: &[S], shape: &[usize]) -> Tensor<S> {
    let width: usize = shape.iter().product();
    let mut out = vec![S::zero(); width];
    for chunk in g.chunks(width.max(1)) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("suffix shape")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), checked: false }
    }

    /// In checked mode every node value (leaves included) must be finite.
    pub fn checked() -> Self {
        Self { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`grad`](Self::grad) but returns zeros where no gradient reached `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(TensorError::invalid(op, format!("axis {axis} out of range for {:?}", self.shape(v))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            S::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let out = Tensor::from_fn([c, r], |i| src[(i % r) * c + i / r]);
        let rg = self.rg(a);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(TensorError::ShapeMismatch { op: name, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bd = self.value(b).data();
        let width = bd.len().max(1);
        let out = self.value(a).data().iter().enumerate().map(|(i, &x)| f(x, bd[i % width])).collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (row-broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.rg(a);
        self.push("relu", value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push("gelu", value, Op::Gelu(a), rg)
    }

    /// 2-D convolution over `x: [N, C, H, W]` with `w: [O, C, KH, KW]` and optional `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sw[0], kh: sw[2], kw: sw[3], stride, pad };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(TensorError::invalid("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![geom.o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out =
            kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new([geom.n, geom.o, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Average pooling over the two trailing axes, no padding.
    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(TensorError::invalid("avgpool2d", format!("kernel {kernel} stride {stride} on {s:?}")));
        }
        let geom = PoolGeom { planes: s[0] * s[1], h: s[2], w: s[3], kernel, stride };
        let out = kernels::avgpool_forward(&geom, self.value(x).data());
        let value = Tensor::new([s[0], s[1], geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x);
        self.push("avgpool2d", value, Op::AvgPool2d { x, geom }, rg)
    }

    /// `softmax(x / temp)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temp: S) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        if temp <= S::zero() {
            return Err(TensorError::invalid("softmax", "temperature must be positive"));
        }
        let value = softmax_along(self.value(x), axis, temp, false);
        let rg = self.rg(x);
        self.push("softmax", value, Op::Softmax { x, axis, temp }, rg)
    }

    /// `log_softmax(x / temp)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize, temp: S) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        if temp <= S::zero() {
            return Err(TensorError::invalid("log_softmax", "temperature must be positive"));
        }
        let value = softmax_along(self.value(x), axis, temp, true);
        let rg = self.rg(x);
        self.push("log_softmax", value, Op::LogSoftmax { x, axis, temp }, rg)
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: S) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        if eps <= S::zero() {
            return Err(TensorError::invalid("l2_normalize", "eps must be positive"));
        }
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| src[idx(k)] * src[idx(k)]).sum::<S>().sqrt().max(eps);
                for k in 0..len {
                    out[idx(k)] = src[idx(k)] / norm;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push("l2_normalize", value, Op::L2Normalize { x, axis, eps }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        let mut out = t.data().to_vec();
        let n = S::lit(width as f64);
        for row in out.chunks_mut(width.max(1)) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for v in row {
                *v = (*v - mean) * inv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push("layer_norm", value, Op::LayerNorm { x, eps }, rg)
    }

    /// `−(1/R) Σ target·logp` where R is the number of rows (all axes but the last).
    pub fn cross_entropy_soft(&mut self, target: Var, logp: Var) -> Result<Var> {
        let (st, sl) = (self.shape(target), self.shape(logp));
        if st != sl || st.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy_soft", lhs: st.to_vec(), rhs: sl.to_vec() });
        }
        let rows = st[..st.len() - 1].iter().product::<usize>();
        let total: S = self.value(target).data().iter().zip(self.value(logp).data()).map(|(&t, &l)| t * l).sum();
        let value = Tensor::scalar(-total / S::lit(rows as f64));
        let rg = self.rg(target) || self.rg(logp);
        self.push("cross_entropy_soft", value, Op::CrossEntropySoft { target, logp }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / S::lit(t.numel() as f64));
        let rg = self.rg(x);
        self.push("mean", value, Op::Mean(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale: S) -> Result<Tensor<S>> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        for v in &mut out {
            *v *= scale;
        }
        Tensor::new(shape, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let value = self.reduce_axis(x, axis, S::one())?;
        let rg = self.rg(x);
        self.push("sum_axis", value, Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis];
        let value = self.reduce_axis(x, axis, S::one() / S::lit(len as f64))?;
        let rg = self.rg(x);
        self.push("mean_axis", value, Op::MeanAxis { x, axis }, rg)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let (outer, full, inner) = axis_split(t.shape(), axis);
        if start + len > full {
            return Err(TensorError::invalid("slice", format!("{start}+{len} exceeds axis length {full}")));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push("slice", value, Op::Slice { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base_shape, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push("concat", value, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("detach", value, Op::Detach, false)
    }

    /// Reverse-mode sweep from the scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (target, contrib) in self.local_grads(i, &g)? {
                    self.accumulate(target, contrib)?;
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<S>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![S::zero(); m * k];
                let mut db = vec![S::zero(); k * n];
                if self.rg(*a) {
                    S::gemm(m, n, k, S::one(), gd, (n, 1), bv.data(), (1, n), S::zero(), &mut da, (k, 1));
                }
                if self.rg(*b) {
                    S::gemm(k, m, n, S::one(), av.data(), (1, k), gd, (n, 1), S::zero(), &mut db, (n, 1));
                }
                vec![(*a, Tensor::new([m, k], da)?), (*b, Tensor::new([k, n], db)?)]
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                vec![(*a, Tensor::from_fn([c, r], |idx| gd[(idx % r) * c + idx / r]))]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mut db = reduce_to_suffix(gd, self.shape(*b));
                if matches!(node.op, Op::Sub(..)) {
                    db = db.map(|v| -v);
                }
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let width = bv.len().max(1);
                let da: Vec<S> = gd.iter().enumerate().map(|(j, &gv)| gv * bv[j % width]).collect();
                let gab: Vec<S> = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                vec![(*a, Tensor::new(y.shape().to_vec(), da)?), (*b, reduce_to_suffix(&gab, self.shape(*b)))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
            Op::Relu(a) => {
                let x = self.value(*a);
                vec![(*a, g.zip_map(x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })?)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                vec![(*a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv))?)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.rg(*x);
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd, need_dx);
                let mut v = vec![(*w, Tensor::new(self.shape(*w).to_vec(), dw)?)];
                if need_dx {
                    v.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                if let Some(b) = b {
                    v.push((*b, Tensor::new([geom.o], db)?));
                }
                v
            }
            Op::AvgPool2d { x, geom } => {
                vec![(*x, Tensor::new(self.shape(*x).to_vec(), kernels::avgpool_backward(geom, gd))?)]
            }
            Op::Softmax { x, axis, temp } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + ii;
                        let dot: S = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot) / *temp;
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax { x, axis, temp } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + ii;
                        let gsum: S = (0..len).map(|k| gd[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = (gd[idx(k)] - yd[idx(k)].exp() * gsum) / *temp;
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::L2Normalize { x, axis, eps } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (xd, yd) = (xv.data(), y.data());
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + ii;
                        let norm = (0..len).map(|k| xd[idx(k)] * xd[idx(k)]).sum::<S>().sqrt();
                        if norm > *eps {
                            let dot: S = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] = (gd[idx(k)] - yd[idx(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                dx[idx(k)] = gd[idx(k)] / *eps;
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(*x);
                let width = *y.shape().last().expect("rank >= 1");
                let n = S::lit(width as f64);
                let mut dx = vec![S::zero(); y.numel()];
                for ((xr, yr), (gr, dr)) in
                    xv.data().chunks(width).zip(y.data().chunks(width)).zip(gd.chunks(width).zip(dx.chunks_mut(width)))
                {
                    let mean = xr.iter().copied().sum::<S>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                    let inv = S::one() / (var + *eps).sqrt();
                    let gmean = gr.iter().copied().sum::<S>() / n;
                    let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for k in 0..width {
                        dr[k] = inv * (gr[k] - gmean - yr[k] * gy);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::CrossEntropySoft { target, logp } => {
                let s = self.shape(*target);
                let rows = S::lit(s[..s.len() - 1].iter().product::<usize>() as f64);
                let scale = -gd[0] / rows;
                vec![(*target, self.value(*logp).map(|l| l * scale)), (*logp, self.value(*target).map(|t| t * scale))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x).to_vec())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x).to_vec(), gd[0]))],
            Op::Mean(x) => {
                let n = S::lit(self.value(*x).numel() as f64);
                vec![(*x, Tensor::full(self.shape(*x).to_vec(), gd[0] / n))]
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (_, len, inner) = axis_split(shape, *axis);
                let scale =
                    if matches!(node.op, Op::MeanAxis { .. }) { S::one() / S::lit(len as f64) } else { S::one() };
                let dx = Tensor::from_fn(shape.to_vec(), |idx| {
                    let o = idx / (len * inner);
                    let ii = idx % inner;
                    gd[o * inner + ii] * scale
                });
                vec![(*x, dx)]
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, full, inner) = axis_split(shape, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![S::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::new(shape.to_vec(), dx)?)]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut parts = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dx.extend_from_slice(&gd[src..src + len * inner]);
                    }
                    offset += len;
                    parts.push((v, Tensor::new(self.shape(v).to_vec(), dx)?));
                }
                parts
            }
        };
        Ok(out)
    }
}

/// Row-wise (log-)softmax of `x / temp` with max subtraction.
pub fn softmax_along<S: Scalar>(t: &Tensor<S>, axis: usize, temp: S, log: bool) -> Tensor<S> {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)] / temp).fold(S::neg_infinity(), S::max);
            let z: S = (0..len).map(|k| (src[idx(k)] / temp - max).exp()).sum();
            let lz = z.ln();
            for k in 0..len {
                let shifted = src[idx(k)] / temp - max;
                out[idx(k)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}
