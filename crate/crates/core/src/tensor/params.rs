use std::collections::BTreeMap;

use super::{grad, Tensor};
use crate::error::{contract_err, Result};

/// Named gradient arrays, one per parameter.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Named parameter collection. Iteration order is the lexicographic name
/// order, which keeps every reduction over parameters deterministic.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.map.get(name) {
            Some(t) => Ok(t),
            None => contract_err(format!("unknown parameter `{name}`")),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.map.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Fresh tracked leaves holding the current values.
    pub fn fresh_leaves(&self) -> ModelParams {
        ModelParams {
            map: self.map.iter().map(|(k, t)| (k.clone(), t.detach_leaf())).collect(),
        }
    }

    /// Keep only the parameters whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    pub fn zero_grad(&self) {
        self.map.values().for_each(Tensor::zero_grad);
    }

    /// Gradients accumulated on the leaves by `Tensor::backward`.
    pub fn leaf_grads(&self) -> Result<GradMap> {
        let mut out = GradMap::new();
        for (name, t) in &self.map {
            match t.grad() {
                Some(g) => {
                    out.insert(name.clone(), g);
                }
                None => return contract_err(format!("parameter `{name}` has no gradient")),
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to every parameter.
    pub fn grad_of(&self, loss: &Tensor) -> Result<GradMap> {
        let tensors = self.tensors();
        let grads = grad(loss, &tensors, false)?;
        Ok(self.map.keys().cloned().zip(grads.into_iter().map(|g| g.to_vec())).collect())
    }

    /// Apply `f(name, value)` to every parameter, producing fresh leaves.
    pub fn map_values(&self, mut f: impl FnMut(&str, &[f64]) -> Vec<f64>) -> Result<ModelParams> {
        let mut out = ModelParams::new();
        for (name, t) in &self.map {
            out.insert(name.clone(), Tensor::param(f(name, t.data()), t.shape())?);
        }
        Ok(out)
    }

    /// Whether every value in every parameter matches `other` bit-for-bit.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
