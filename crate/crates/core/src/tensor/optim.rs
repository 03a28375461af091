use std::collections::BTreeMap;

use super::{GradMap, ModelParams};
use crate::error::{contract_err, dim_err, Result};

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Learning rates can be overridden per parameter group, selected by name
/// prefix (the longest matching prefix wins).
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    group_rates: Vec<(String, f64)>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            group_rates: Vec::new(),
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_group_rate(mut self, prefix: impl Into<String>, rate: f64) -> Self {
        self.group_rates.push((prefix.into(), rate));
        self
    }

    pub fn rate_for(&self, name: &str) -> f64 {
        self.group_rates
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.learning_rate, |(_, r)| *r)
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// One update from explicit gradients.
    pub fn apply(&mut self, params: &ModelParams, grads: &GradMap) -> Result<ModelParams> {
        let mut out = ModelParams::new();
        for (name, theta) in params.iter() {
            let Some(g) = grads.get(name) else {
                return contract_err(format!("parameter `{name}` has no gradient"));
            };
            if g.len() != theta.numel() {
                return dim_err(format!("gradient for `{name}` has {} values, expected {}", g.len(), theta.numel()));
            }
            let lr = self.rate_for(name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; theta.numel()]);
            if v.len() != theta.numel() {
                return dim_err(format!("velocity for `{name}` does not match its parameter"));
            }
            let mut next = theta.to_vec();
            for ((w, vi), gi) in next.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
            out.insert(name.clone(), super::Tensor::param(next, theta.shape())?);
        }
        Ok(out)
    }
}

/// Update using the gradients accumulated on the parameter leaves.
pub fn sgd_step(params: &ModelParams, state: &mut SgdState) -> Result<ModelParams> {
    let grads = params.leaf_grads()?;
    state.apply(params, &grads)
}
