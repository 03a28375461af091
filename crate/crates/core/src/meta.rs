//! Episodic task sampling and MAML-style bi-level optimization.
//!
//! The inner loop adapts a copy of the parameters on a task's support set;
//! the outer loop moves the shared initialization along the gradient of the
//! query losses evaluated at the adapted parameters. In first-order mode the
//! adapted parameters are fresh leaves and the query gradient is used as is;
//! in second-order mode the inner updates stay on the tape and the query loss
//! is differentiated through them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::rng;
use crate::tensor::{grad, GradMap, ModelParams, SgdState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner-loop rate α.
    pub inner_lr: f64,
    /// Outer-loop rate β.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub order: Order,
    pub tasks_per_batch: usize,
    /// Classes per episode; `None` uses every class in the dataset.
    pub n_way: Option<usize>,
    pub k_shot: usize,
    pub query: usize,
    /// Per-group inner rates as `(name prefix, rate)`; longest prefix wins.
    pub inner_group_rates: Vec<(String, f64)>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 1,
            order: Order::First,
            tasks_per_batch: 4,
            n_way: None,
            k_shot: 5,
            query: 15,
            inner_group_rates: Vec::new(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite() && self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return contract_err("meta learning rates must be finite and nonnegative");
        }
        if self.inner_steps == 0 || self.tasks_per_batch == 0 || self.k_shot == 0 {
            return contract_err("inner_steps, tasks_per_batch and k_shot must be at least 1");
        }
        if self.n_way == Some(0) {
            return contract_err("n_way must be at least 1");
        }
        Ok(())
    }

    pub fn inner_rate_for(&self, name: &str) -> f64 {
        self.inner_group_rates
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.inner_lr, |(_, r)| *r)
    }
}

/// One N-way K-shot episode. Item fields index the source dataset; label
/// fields hold episode labels in `[0, n_way)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeTask {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// `classes[episode_label]` is the original class id.
    pub classes: Vec<usize>,
}

/// Draw `count` episodes from a labeled dataset.
///
/// Classes are drawn without replacement and numbered in ascending order of
/// their original id, so when every class takes part the episode labels are
/// the dataset labels.
pub fn sample_tasks(labels: &[usize], n_way: usize, k_shot: usize, query: usize, count: usize, seed: u64) -> Result<Vec<EpisodeTask>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if n_way == 0 || k_shot == 0 {
        return contract_err("n_way and k_shot must be at least 1");
    }
    if by_class.len() < n_way {
        return Err(Error::Capacity(format!("{n_way}-way episodes need {n_way} classes, dataset has {}", by_class.len())));
    }
    if let Some((class, items)) = by_class.iter().find(|(_, v)| v.len() < k_shot + query) {
        return Err(Error::Capacity(format!(
            "class {class} has {} samples, episodes need {} ({k_shot} support + {query} query)",
            items.len(),
            k_shot + query
        )));
    }
    let class_ids: Vec<usize> = by_class.keys().copied().collect();
    let mut r = rng::stream(seed, &[rng::TAG_TASKS]);
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        let mut classes: Vec<usize> = class_ids.choose_multiple(&mut r, n_way).copied().collect();
        classes.sort_unstable();
        let mut task = EpisodeTask { support: vec![], support_labels: vec![], query: vec![], query_labels: vec![], classes };
        for (label, class) in task.classes.iter().enumerate() {
            let picked: Vec<usize> = by_class[class].choose_multiple(&mut r, k_shot + query).copied().collect();
            task.support.extend_from_slice(&picked[..k_shot]);
            task.support_labels.extend(std::iter::repeat(label).take(k_shot));
            task.query.extend_from_slice(&picked[k_shot..]);
            task.query_labels.extend(std::iter::repeat(label).take(query));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Loss of one labeled item set under given parameters.
pub struct TaskEval {
    pub loss: Tensor,
    /// Fraction of items classified correctly, when the learner predicts.
    pub accuracy: Option<f64>,
}

pub trait TaskLoss {
    fn evaluate(&self, params: &ModelParams, items: &[usize], labels: &[usize]) -> Result<TaskEval>;
}

fn ensure_finite(loss: &Tensor, params: &ModelParams) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let culprit = params
        .iter()
        .find(|(_, t)| !t.is_finite())
        .map_or_else(|| "no parameter is non-finite; the loss itself diverged".to_string(), |(n, _)| format!("parameter `{n}` is non-finite"));
    Err(Error::Numeric(format!("loss is {}: {culprit}", loss.item())))
}

/// `θ' = θ − α∇ℒ(support; θ)`, repeated `inner_steps` times. Never touches
/// `params`; in second-order mode the result stays connected to it.
pub fn inner_adapt<L: TaskLoss>(learner: &L, params: &ModelParams, items: &[usize], labels: &[usize], cfg: &MetaConfig) -> Result<ModelParams> {
    if items.is_empty() {
        return contract_err("support set is empty");
    }
    let mut cur = params.clone();
    for _ in 0..cfg.inner_steps {
        let loss = learner.evaluate(&cur, items, labels)?.loss;
        ensure_finite(&loss, &cur)?;
        let tensors = cur.tensors();
        match cfg.order {
            Order::First => {
                let grads = grad(&loss, &tensors, false)?;
                let by_name: GradMap = cur.names().cloned().zip(grads.iter().map(Tensor::to_vec)).collect();
                cur = cur.map_values(|name, v| {
                    let rate = cfg.inner_rate_for(name);
                    v.iter().zip(&by_name[name]).map(|(w, g)| w - rate * g).collect()
                })?;
            }
            Order::Second => {
                let grads = grad(&loss, &tensors, true)?;
                let mut next = ModelParams::new();
                for ((name, t), g) in cur.iter().zip(grads) {
                    next.insert(name.clone(), t.sub(&g.scale(cfg.inner_rate_for(name)))?);
                }
                cur = next;
            }
        }
    }
    Ok(cur)
}

/// Summed query gradient `∇_θ Σᵢ ℒ(queryᵢ; θ'ᵢ)` with the mean query loss
/// and accuracy. Tasks are reduced in index order.
pub fn meta_gradient<L: TaskLoss>(learner: &L, params: &ModelParams, tasks: &[EpisodeTask], cfg: &MetaConfig) -> Result<(GradMap, f64, Option<f64>)> {
    if tasks.is_empty() {
        return contract_err("outer update needs at least one task");
    }
    let mut total: GradMap = params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect();
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut acc_seen = true;
    for task in tasks {
        let adapted = inner_adapt(learner, params, &task.support, &task.support_labels, cfg)?;
        let eval = learner.evaluate(&adapted, &task.query, &task.query_labels)?;
        ensure_finite(&eval.loss, &adapted)?;
        loss_sum += eval.loss.item();
        match eval.accuracy {
            Some(a) => acc_sum += a,
            None => acc_seen = false,
        }
        let wrt = match cfg.order {
            Order::First => adapted.tensors(),
            Order::Second => params.tensors(),
        };
        let grads = grad(&eval.loss, &wrt, false)?;
        for ((_, acc), g) in total.iter_mut().zip(grads) {
            acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    let n = tasks.len() as f64;
    Ok((total, loss_sum / n, acc_seen.then_some(acc_sum / n)))
}

/// `θ ← θ − β∇_θ Σᵢ ℒ(queryᵢ; θ'ᵢ)`.
pub fn outer_update<L: TaskLoss>(learner: &L, params: &ModelParams, tasks: &[EpisodeTask], cfg: &MetaConfig) -> Result<ModelParams> {
    let (grads, _, _) = meta_gradient(learner, params, tasks, cfg)?;
    params.map_values(|name, v| v.iter().zip(&grads[name]).map(|(w, g)| w - cfg.outer_lr * g).collect())
}

/// How the outer gradient is applied.
pub enum OuterOptimizer {
    /// Plain step with `MetaConfig::outer_lr`.
    Plain,
    /// Momentum SGD with its own (group) rates; the gradient is scaled first.
    Sgd { state: SgdState, grad_scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaRecord {
    pub iteration: usize,
    pub query_loss: f64,
    pub query_accuracy: Option<f64>,
}

/// Episodic sampling source: dataset labels plus episode shape. A `query`
/// of 0 scores each task on its own support set.
pub struct EpisodeSource<'a> {
    pub labels: &'a [usize],
    pub n_way: usize,
    pub k_shot: usize,
    pub query: usize,
}

/// Run `iterations` outer steps; returns the final parameters and one
/// history record per step.
pub fn meta_train<L: TaskLoss>(
    learner: &L,
    source: &EpisodeSource<'_>,
    params: &ModelParams,
    cfg: &MetaConfig,
    iterations: usize,
    seed: u64,
    optimizer: &mut OuterOptimizer,
) -> Result<(ModelParams, Vec<MetaRecord>)> {
    cfg.validate()?;
    let mut theta = params.fresh_leaves();
    let mut history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut tasks = sample_tasks(
            source.labels,
            source.n_way,
            source.k_shot,
            source.query,
            cfg.tasks_per_batch,
            rng::derive(seed, &[it as u64]),
        )?;
        if source.query == 0 {
            for t in &mut tasks {
                t.query = t.support.clone();
                t.query_labels = t.support_labels.clone();
            }
        }
        let (grads, query_loss, query_accuracy) = meta_gradient(learner, &theta, &tasks, cfg)?;
        theta = match optimizer {
            OuterOptimizer::Plain => theta.map_values(|name, v| v.iter().zip(&grads[name]).map(|(w, g)| w - cfg.outer_lr * g).collect())?,
            OuterOptimizer::Sgd { state, grad_scale } => {
                let scaled: GradMap = grads.into_iter().map(|(k, g)| (k, g.into_iter().map(|x| x * *grad_scale).collect())).collect();
                state.apply(&theta, &scaled)?
            }
        };
        history.push(MetaRecord { iteration: it, query_loss, query_accuracy });
    }
    Ok((theta, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ℒ(θ) = ½‖θ‖², independent of the items.
    struct HalfSquare;

    impl TaskLoss for HalfSquare {
        fn evaluate(&self, params: &ModelParams, _: &[usize], _: &[usize]) -> Result<TaskEval> {
            Ok(TaskEval { loss: params.get("theta")?.square().sum().scale(0.5), accuracy: None })
        }
    }

    /// ℒ(θ) = cᵀθ.
    struct Linear(Vec<f64>);

    impl TaskLoss for Linear {
        fn evaluate(&self, params: &ModelParams, _: &[usize], _: &[usize]) -> Result<TaskEval> {
            let c = Tensor::new(self.0.clone(), &[self.0.len()])?;
            Ok(TaskEval { loss: params.get("theta")?.mul(&c)?.sum(), accuracy: None })
        }
    }

    fn theta(v: &[f64]) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("theta", Tensor::param(v.to_vec(), &[v.len()]).unwrap());
        p
    }

    fn one_task() -> Vec<EpisodeTask> {
        vec![EpisodeTask { support: vec![0], support_labels: vec![0], query: vec![1], query_labels: vec![0], classes: vec![0] }]
    }

    fn cfg(alpha: f64, beta: f64, steps: usize, order: Order) -> MetaConfig {
        MetaConfig { inner_lr: alpha, outer_lr: beta, inner_steps: steps, order, ..MetaConfig::default() }
    }

    fn value(p: &ModelParams) -> Vec<f64> {
        p.get("theta").unwrap().to_vec()
    }

    #[test]
    fn inner_step_on_quadratic() {
        let p = theta(&[1.0, 2.0]);
        let a = inner_adapt(&HalfSquare, &p, &[0], &[0], &cfg(0.1, 0.0, 1, Order::First)).unwrap();
        let v = value(&a);
        assert!((v[0] - 0.9).abs() < 1e-15 && (v[1] - 1.8).abs() < 1e-15);
        assert_eq!(value(&p), vec![1.0, 2.0]);
    }

    #[test]
    fn two_inner_steps_follow_the_recurrence() {
        for order in [Order::First, Order::Second] {
            let a = inner_adapt(&HalfSquare, &theta(&[1.0]), &[0], &[0], &cfg(0.1, 0.0, 2, order)).unwrap();
            assert!((value(&a)[0] - 0.81).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inner_rate_is_a_no_op() {
        let a = inner_adapt(&HalfSquare, &theta(&[0.3, -4.0]), &[0], &[0], &cfg(0.0, 0.0, 3, Order::First)).unwrap();
        assert_eq!(value(&a), vec![0.3, -4.0]);
    }

    #[test]
    fn first_order_outer_step() {
        let p = outer_update(&HalfSquare, &theta(&[1.0]), &one_task(), &cfg(0.1, 0.5, 1, Order::First)).unwrap();
        assert!((value(&p)[0] - 0.55).abs() <= 1e-9);
    }

    #[test]
    fn second_order_outer_step() {
        let p = outer_update(&HalfSquare, &theta(&[1.0]), &one_task(), &cfg(0.1, 0.5, 1, Order::Second)).unwrap();
        assert!((value(&p)[0] - 0.595).abs() <= 1e-9);
    }

    #[test]
    fn zero_outer_rate_is_a_no_op() {
        let p = outer_update(&HalfSquare, &theta(&[1.0]), &one_task(), &cfg(0.1, 0.0, 1, Order::Second)).unwrap();
        assert_eq!(value(&p), vec![1.0]);
    }

    #[test]
    fn orders_agree_when_the_hessian_vanishes() {
        let learner = Linear(vec![0.5, -2.0, 3.0]);
        let p = theta(&[0.1, 0.2, 0.3]);
        let f = outer_update(&learner, &p, &one_task(), &cfg(0.2, 0.3, 2, Order::First)).unwrap();
        let s = outer_update(&learner, &p, &one_task(), &cfg(0.2, 0.3, 2, Order::Second)).unwrap();
        for (a, b) in value(&f).iter().zip(value(&s)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_support_or_tasks_are_rejected() {
        assert!(inner_adapt(&HalfSquare, &theta(&[1.0]), &[], &[], &MetaConfig::default()).is_err());
        assert!(outer_update(&HalfSquare, &theta(&[1.0]), &[], &MetaConfig::default()).is_err());
    }

    struct Exploding;

    impl TaskLoss for Exploding {
        fn evaluate(&self, params: &ModelParams, _: &[usize], _: &[usize]) -> Result<TaskEval> {
            Ok(TaskEval { loss: params.get("theta")?.scale(f64::INFINITY).sum(), accuracy: None })
        }
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let err = inner_adapt(&Exploding, &theta(&[1.0]), &[0], &[0], &MetaConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn episode_contract() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let tasks = sample_tasks(&labels, 3, 1, 1, 10, 7).unwrap();
        for t in &tasks {
            assert_eq!(t.support.len(), 3);
            assert_eq!(t.query.len(), 3);
            assert!(t.support.iter().all(|i| !t.query.contains(i)));
            assert_eq!(t.classes, vec![0, 1, 2]);
            for (&i, &l) in t.support.iter().zip(&t.support_labels) {
                assert_eq!(labels[i], t.classes[l]);
            }
        }
        assert_eq!(tasks, sample_tasks(&labels, 3, 1, 1, 10, 7).unwrap());
    }

    #[test]
    fn episode_capacity_errors_name_the_class() {
        let labels = vec![0, 0, 0, 1, 2, 2, 2];
        match sample_tasks(&labels, 3, 2, 1, 1, 0) {
            Err(Error::Capacity(msg)) => assert!(msg.contains("class 1")),
            other => panic!("expected capacity error, got {other:?}"),
        }
        assert!(matches!(sample_tasks(&labels, 4, 1, 0, 1, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let classes = 6;
        let labels: Vec<usize> = (0..classes * 10).map(|i| i % classes).collect();
        let (n_way, count) = (3, 1000);
        let tasks = sample_tasks(&labels, n_way, 2, 3, count, 21).unwrap();
        let expected = n_way as f64 / classes as f64;
        for c in 0..classes {
            let freq = tasks.iter().filter(|t| t.classes.contains(&c)).count() as f64 / count as f64;
            assert!((freq - expected).abs() <= 0.05, "class {c}: {freq}");
        }
        for t in &tasks {
            let mut sorted = t.classes.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), n_way, "remap must be a bijection");
        }
    }

    /// ℒ(θ) = ½‖θ − μ‖² shared by every task.
    struct Shifted;

    impl TaskLoss for Shifted {
        fn evaluate(&self, params: &ModelParams, _: &[usize], _: &[usize]) -> Result<TaskEval> {
            let mu = Tensor::new(vec![2.0, -1.0], &[2])?;
            Ok(TaskEval { loss: params.get("theta")?.sub(&mu)?.square().sum().scale(0.5), accuracy: None })
        }
    }

    #[test]
    fn meta_train_on_a_quadratic_family() {
        let labels = vec![0, 0, 1, 1];
        let source = EpisodeSource { labels: &labels, n_way: 2, k_shot: 1, query: 1 };
        let start = theta(&[0.0, 0.0]);
        let c = cfg(0.1, 0.01, 1, Order::First);
        let (same, hist) = meta_train(&Shifted, &source, &start, &c, 0, 0, &mut OuterOptimizer::Plain).unwrap();
        assert!(hist.is_empty());
        assert!(same.bit_eq(&start));
        let (_, hist) = meta_train(&Shifted, &source, &start, &c, 10, 0, &mut OuterOptimizer::Plain).unwrap();
        assert_eq!(hist.len(), 10);
        for w in hist.windows(2) {
            assert!(w[1].query_loss < w[0].query_loss);
        }
    }
}
