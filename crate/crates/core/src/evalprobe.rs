//! Frozen-feature evaluation: centered-crop feature extraction, a linear
//! (softmax regression) probe and cosine k-NN.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sslab_tensor::{Checkpoint, CheckpointError, Graph, Params, Scalar, ScheduleSpec, Sgd, Tensor, TensorError};
use thiserror::Error;

use crate::datapipe::{center_crop_rect, crop_resize, DataError, Dataset, Normalize};
use crate::model::{extract, EncoderConfig};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("encoder/checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("degenerate split: {0}")]
    Split(String),
    #[error("k = {k} exceeds {n_train} training rows")]
    KTooLarge { k: usize, n_train: usize },
}

/// Frozen features, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S: Scalar = f64> {
    pub rows: Tensor<S>,
    pub labels: Vec<u8>,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(rows: Tensor<S>, labels: Vec<u8>) -> Result<Self, EvalError> {
        if rows.rank() != 2 || rows.shape()[0] != labels.len() {
            return Err(EvalError::Mismatch(format!("{:?} rows for {} labels", rows.shape(), labels.len())));
        }
        if !rows.is_finite() {
            return Err(TensorError::NonFinite { op: "features" }.into());
        }
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    fn take(&self, idx: &[usize]) -> (Vec<&[S]>, Vec<u8>) {
        (idx.iter().map(|&i| self.rows.row(i)).collect(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Rows written as CSV: `label,f0,f1,…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (i, &l) in self.labels.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in self.rows.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Disjoint index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn validate(&self, n: usize) -> Result<(), EvalError> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return Err(EvalError::Split(format!("index {i} outside {n} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(EvalError::Split(format!("index {i} used twice")));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(EvalError::Split("empty train or test set".into()));
        }
        Ok(())
    }
}

/// Random holdout of `round(n·test_fraction)` rows.
pub fn split_holdout(n: usize, test_fraction: f64, seed: u64) -> Result<Split, EvalError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(EvalError::Split(format!("test fraction {test_fraction}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, "split", 0));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let split = Split { test: order[..n_test].to_vec(), train: order[n_test..].to_vec() };
    split.validate(n)?;
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub resolution: usize,
    /// Side of the centered crop relative to the shorter image side.
    pub crop_fraction: f64,
    pub chunk: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { resolution: 56, crop_fraction: 0.875, chunk: 64 }
    }
}

/// Pooled backbone features of every image from a single centered crop.
pub fn extract_features<S: Scalar>(
    enc: &EncoderConfig,
    params: &Params<S>,
    data: &Dataset,
    norm: &Normalize,
    cfg: &ExtractConfig,
) -> Result<FeatureMatrix<S>, EvalError> {
    let (h, w, _) = data.dims().ok_or_else(|| EvalError::Split("empty dataset".into()))?;
    let rect = center_crop_rect(w, h, cfg.crop_fraction)?;
    let r = cfg.resolution;
    let mut rows = Vec::with_capacity(data.len() * enc.feature_dim());
    for chunk in data.images.chunks(cfg.chunk.max(1)) {
        let views: Vec<Result<Tensor<S>, DataError>> =
            chunk.par_iter().map(|img| crop_resize(img, &rect, r, norm)).collect();
        let mut x = Vec::with_capacity(chunk.len() * 3 * r * r);
        for v in views {
            x.extend_from_slice(v?.data());
        }
        let f = extract(enc, params, Tensor::new([chunk.len(), 3, r, r], x)?)?;
        rows.extend_from_slice(f.data());
    }
    FeatureMatrix::new(Tensor::new([data.len(), enc.feature_dim()], rows)?, data.labels.clone())
}

/// Student encoder stored in a training checkpoint.
pub fn load_encoder<S: Scalar>(path: &Path) -> Result<(EncoderConfig, Params<S>), EvalError> {
    let ck = Checkpoint::<S>::load(path)?;
    let enc: EncoderConfig = ck
        .meta
        .get("encoder")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| EvalError::Mismatch(e.to_string()))?
        .ok_or_else(|| EvalError::Mismatch("checkpoint has no encoder description".into()))?;
    let params = ck.tensors.strip_prefix("student.");
    let expected: Params<S> = enc.init(&mut seed::stream(0, "layout", 0))?;
    let backbone = |p: &Params<S>| -> Vec<(String, Vec<usize>)> {
        p.iter().filter(|(n, _)| n.starts_with("conv")).map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    };
    if backbone(&params) != backbone(&expected) {
        return Err(EvalError::Mismatch("backbone tensors do not match the encoder description".into()));
    }
    Ok((enc, params))
}

/// Metadata value from a checkpoint, if present.
pub fn checkpoint_meta(path: &Path, key: &str) -> Result<Option<Value>, EvalError> {
    Ok(Checkpoint::<f64>::load(path)?.meta.get(key).cloned())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.5, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn class_count_of(labels: &[u8]) -> usize {
    labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
}

/// Softmax regression on z-scored features (train statistics), trained by
/// full-batch SGD with a cosine learning-rate decay; returns test top-1.
pub fn linear_probe<S: Scalar>(
    feats: &FeatureMatrix<S>,
    split: &Split,
    cfg: &ProbeConfig,
) -> Result<EvalResult, EvalError> {
    split.validate(feats.len())?;
    let (train_rows, train_labels) = feats.take(&split.train);
    let classes = class_count_of(&feats.labels);
    let distinct = {
        let mut l = train_labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(EvalError::Split("training labels contain a single class".into()));
    }
    let d = feats.dim();
    let n = train_rows.len();
    let mut mean = vec![S::zero(); d];
    let mut sd = vec![S::zero(); d];
    for r in &train_rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= S::lit(n as f64));
    for r in &train_rows {
        sd.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (&v, &m))| *s += (v - m) * (v - m));
    }
    sd.iter_mut().for_each(|s| *s = (*s / S::lit(n as f64)).sqrt().max(S::lit(1e-8)));
    let z = |rows: &[&[S]]| -> Result<Tensor<S>, TensorError> {
        let mut v = Vec::with_capacity(rows.len() * d);
        for r in rows {
            v.extend(r.iter().zip(mean.iter().zip(&sd)).map(|(&x, (&m, &s))| (x - m) / s));
        }
        Tensor::new([rows.len(), d], v)
    };
    let x = z(&train_rows)?;
    let onehot = Tensor::from_fn([n, classes], |i| {
        if train_labels[i / classes] as usize == i % classes {
            S::one()
        } else {
            S::zero()
        }
    });
    let mut params = Params::new();
    params.insert("w", Tensor::<S>::zeros([d, classes]));
    params.insert("b", Tensor::<S>::zeros([classes]));
    let mut opt = Sgd::new(S::lit(cfg.momentum));
    let sched = ScheduleSpec::cosine(cfg.lr, 0.0, 0, cfg.epochs.max(1));
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true)?;
        let xv = g.constant(x.clone())?;
        let logits = g.matmul(xv, p.var("w")?)?;
        let logits = g.add(logits, p.var("b")?)?;
        let logp = g.log_softmax(logits, 1, S::one())?;
        let t = g.constant(onehot.clone())?;
        let loss = g.cross_entropy_soft(t, logp)?;
        g.backward(loss)?;
        let grads = Params::grads_from(&p, &g);
        opt.step(&mut params, &grads, S::lit(sched.value(epoch)?), S::lit(cfg.weight_decay))?;
    }
    let (test_rows, test_labels) = feats.take(&split.test);
    let xt = z(&test_rows)?;
    let (w, b) = (params.get("w")?, params.get("b")?);
    let correct = (0..test_rows.len())
        .filter(|&i| {
            let row = xt.row(i);
            let score =
                |c: usize| row.iter().enumerate().map(|(j, &v)| v * w.data()[j * classes + c]).sum::<S>() + b.data()[c];
            argmax((0..classes).map(score)) == test_labels[i] as usize
        })
        .count();
    Ok(EvalResult { accuracy: correct as f64 / test_rows.len() as f64, n_train: n, n_test: test_rows.len() })
}

/// First index of the maximum.
fn argmax<S: Scalar>(it: impl Iterator<Item = S>) -> usize {
    let mut best = (0, S::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn unit_rows<S: Scalar>(rows: &[&[S]]) -> Vec<Vec<S>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|&v| v * v).sum::<S>().sqrt();
            let inv = if n > S::zero() { S::one() / n } else { S::zero() };
            r.iter().map(|&v| v * inv).collect()
        })
        .collect()
}

/// Cosine-similarity k-NN with majority vote. Neighbour ties go to the lower
/// training index; vote ties go to the class whose best neighbour ranks first.
pub fn knn_eval<S: Scalar>(feats: &FeatureMatrix<S>, k: usize, split: &Split) -> Result<EvalResult, EvalError> {
    split.validate(feats.len())?;
    if k == 0 || k > split.train.len() {
        return Err(EvalError::KTooLarge { k, n_train: split.train.len() });
    }
    let (train_rows, train_labels) = feats.take(&split.train);
    let (test_rows, test_labels) = feats.take(&split.test);
    let train = unit_rows(&train_rows);
    let test = unit_rows(&test_rows);
    let classes = class_count_of(&feats.labels);
    let correct: usize = test
        .par_iter()
        .zip(&test_labels)
        .map(|(q, &label)| {
            let mut sims: Vec<(S, usize)> =
                train.iter().enumerate().map(|(i, r)| (q.iter().zip(r).map(|(&a, &b)| a * b).sum::<S>(), i)).collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, usize::MAX); classes];
            for (rank, &(_, i)) in sims[..k].iter().enumerate() {
                let v = &mut votes[train_labels[i] as usize];
                v.0 += 1;
                v.1 = v.1.min(rank);
            }
            let pred = (0..classes).max_by(|&a, &b| votes[a].0.cmp(&votes[b].0).then(votes[b].1.cmp(&votes[a].1)));
            usize::from(pred == Some(label as usize))
        })
        .sum();
    Ok(EvalResult { accuracy: correct as f64 / test.len() as f64, n_train: train.len(), n_test: test.len() })
}
