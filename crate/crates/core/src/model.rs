//! Small convolutional encoder with a projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sslab_tensor::{Bound, Graph, Params, Scalar, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-8;
const LAYER_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the conv blocks.
    pub channels: Vec<usize>,
    /// Kernel size and stride of the first (non-overlapping) block; later
    /// blocks are 3×3 with stride 2.
    pub stem: usize,
    pub activation: Activation,
    pub hidden: usize,
    pub embed: usize,
    /// Width of the extra linear layer producing logits (0 = none).
    pub out_dim: usize,
    /// Normalize each sample over `C·H·W` after every conv (no affine).
    pub norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            stem: 2,
            activation: Activation::Relu,
            hidden: 128,
            embed: 32,
            out_dim: 64,
            norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels.is_empty()
            || self.channels.contains(&0)
            || self.stem == 0
            || self.hidden == 0
            || self.embed == 0
        {
            return Err(TensorError::invalid("encoder", format!("degenerate config {self:?}")));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// `U(−√(6/fan_in), √(6/fan_in))` entries.
    pub fn uniform_init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
    }

    /// Fan-in uniform weights, zero biases.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Params<S>, TensorError> {
        self.validate()?;
        let mut p = Params::new();
        let mut uniform = |shape: Vec<usize>, fan_in: usize| Self::uniform_init(rng, shape, fan_in);
        let mut c_in = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            let k = if i == 0 { self.stem } else { 3 };
            p.insert(format!("conv{i}.w"), uniform(vec![c, c_in, k, k], c_in * k * k));
            p.insert(format!("conv{i}.b"), Tensor::zeros([c]));
            c_in = c;
        }
        p.insert("fc1.w", uniform(vec![c_in, self.hidden], c_in));
        p.insert("fc1.b", Tensor::zeros([self.hidden]));
        p.insert("fc2.w", uniform(vec![self.hidden, self.embed], self.hidden));
        p.insert("fc2.b", Tensor::zeros([self.embed]));
        if self.out_dim > 0 {
            p.insert("last.w", uniform(vec![self.embed, self.out_dim], self.embed));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Pooled backbone features `[B, C]`.
    pub features: Var,
    /// Unit-norm projection `[B, embed]`.
    pub embedding: Var,
    /// `embedding · last.w`, when the config has an output layer.
    pub logits: Option<Var>,
}

/// Backbone only: conv blocks, optional normalization, activation, global average pooling.
pub fn backbone<S: Scalar>(g: &mut Graph<S>, cfg: &EncoderConfig, p: &Bound, x: Var) -> Result<Var, TensorError> {
    let mut h = x;
    for i in 0..cfg.channels.len() {
        let (stride, pad) = if i == 0 { (cfg.stem, 0) } else { (2, 1) };
        h = g.conv2d(h, p.var(&format!("conv{i}.w"))?, Some(p.var(&format!("conv{i}.b"))?), stride, pad)?;
        if cfg.norm {
            let s = g.value(h).shape().to_vec();
            let flat = g.reshape(h, [s[0], s[1] * s[2] * s[3]])?;
            let n = g.layer_norm(flat, S::lit(LAYER_EPS))?;
            h = g.reshape(n, s)?;
        }
        h = cfg.activation.apply(g, h)?;
    }
    let s = g.value(h).shape().to_vec();
    let flat = g.reshape(h, [s[0], s[1], s[2] * s[3]])?;
    g.mean_axis(flat, 2)
}

pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    p: &Bound,
    x: Var,
) -> Result<EncoderOutput, TensorError> {
    let features = backbone(g, cfg, p, x)?;
    let h = g.matmul(features, p.var("fc1.w")?)?;
    let h = g.add(h, p.var("fc1.b")?)?;
    let h = cfg.activation.apply(g, h)?;
    let z = g.matmul(h, p.var("fc2.w")?)?;
    let z = g.add(z, p.var("fc2.b")?)?;
    let embedding = g.l2_normalize(z, 1, S::lit(NORM_EPS))?;
    let logits = if cfg.out_dim > 0 { Some(g.matmul(embedding, p.var("last.w")?)?) } else { None };
    Ok(EncoderOutput { features, embedding, logits })
}

/// Pooled features of a `[B, 3, H, W]` batch without recording gradients.
pub fn extract<S: Scalar>(cfg: &EncoderConfig, params: &Params<S>, x: Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false)?;
    let x = g.constant(x)?;
    let f = backbone(&mut g, cfg, &bound, x)?;
    Ok(g.value(f).clone())
}
