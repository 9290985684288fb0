use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<S: Scalar = f64>(BTreeMap<String, Tensor<S>>);

/// Graph handles for a [`Params`] set bound into one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.0.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Option<Tensor<S>> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.0.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.0.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.0.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.0 {
            vars.insert(name.clone(), graph.leaf(t.clone(), trainable)?);
        }
        Ok(Bound(vars))
    }

    /// Reads the gradient of every bound tensor (zeros where none flowed).
    pub fn grads_from(bound: &Bound, graph: &Graph<S>) -> Self {
        Self(bound.0.iter().map(|(n, &v)| (n.clone(), graph.grad_or_zeros(v))).collect())
    }

    /// Returns a copy whose names carry `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self(self.0.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect())
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self(self.0.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect())
    }

    pub fn extend(&mut self, other: Self) {
        self.0.extend(other.0);
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for Params<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
