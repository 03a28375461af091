//! Pretrain, fine-tune and evaluate.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{Curve, MetricsReport, Scores};
use crate::augment::{identity_views, sample_views, AugmentedView};
use crate::datapipe::{
    corrupt, label_budget, load_manifest, overlap_sample_all, split, synth_generate, NormStats, SignalRecord, WindowDataset,
};
use crate::error::{Error, Result};
use crate::meta::{inner_adapt, meta_train, EpisodeSource, MetaConfig, OuterOptimizer, TaskEval, TaskLoss};
use crate::model::{
    add_instance_heads, branch_input, encode_branch, init_params, linear_head, project, Branch, ModelConfig, CLASSIFIER_PREFIX,
};
use crate::objective::{align_loss, cls_loss, cross_corr_loss, final_loss, LossParts, LossWeights};
use crate::rng;
use crate::spectral::Signal;
use crate::tensor::{no_grad, ModelParams, SgdState, Tensor};

const INSTANCE_PREFIX: &str = "inst_";
const EVAL_CHUNK: usize = 64;

/// Normalized train/test windows plus the raw test windows for corruption.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: WindowDataset,
    pub test: WindowDataset,
    pub test_raw: WindowDataset,
    pub stats: NormStats,
}

pub fn load_records(cfg: &RunConfig) -> Result<Vec<SignalRecord>> {
    match &cfg.data.manifest {
        Some(path) => load_manifest(path),
        None => synth_generate(&cfg.data.synth, cfg.data.synth_records, rng::derive(cfg.run.seed, &[rng::TAG_SYNTH])),
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    prepare_records(cfg, &load_records(cfg)?)
}

pub fn prepare_records(cfg: &RunConfig, records: &[SignalRecord]) -> Result<PreparedData> {
    for r in records {
        if let Some(l) = r.label.filter(|&l| l >= cfg.model.n_classes) {
            return Err(Error::Contract(format!("record `{}` has label {l}, model has {} classes", r.source, cfg.model.n_classes)));
        }
    }
    let all = overlap_sample_all(records, cfg.data.window, cfg.data.step)?;
    let (train_raw, test_raw) = split(&all, cfg.data.split_ratio, cfg.run.seed)?;
    if test_raw.is_empty() {
        return Err(Error::Capacity("split left no test windows".into()));
    }
    let stats = NormStats::fit(&train_raw, cfg.data.norm)?;
    Ok(PreparedData { train: stats.apply(&train_raw), test: stats.apply(&test_raw), test_raw, stats })
}

fn strip_instance_heads(params: &ModelParams) -> ModelParams {
    let mut p = params.fresh_leaves();
    p.retain(|n| !n.starts_with(INSTANCE_PREFIX));
    p
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss: Curve,
    pub align: Curve,
    pub instance: Curve,
}

/// Self-supervised stage: augmented views, branch alignment and instance
/// discrimination over training-window indices.
pub fn pretrain(cfg: &RunConfig, data: &PreparedData) -> Result<PretrainOutcome> {
    let seed = cfg.run.seed;
    let m = &cfg.model;
    let p = &cfg.pretrain;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Capacity("no training windows to pretrain on".into()));
    }
    let mut params = init_params(m, rng::derive(seed, &[rng::TAG_INIT]))?;
    add_instance_heads(&mut params, m, n, rng::derive(seed, &[rng::TAG_INIT, 1]))?;
    let mut opt = SgdState::new(p.learning_rate, p.momentum, p.weight_decay);
    let mut curves = (Curve::new("pretrain_loss"), Curve::new("pretrain_align"), Curve::new("pretrain_instance"));
    let batch = p.batch_size.min(n);
    let signals: Vec<Signal> = data
        .train
        .windows
        .iter()
        .map(|w| Signal::new(w.samples.clone(), data.train.sample_rate))
        .collect::<Result<_>>()?;

    for it in 0..p.iterations {
        let picked = sample(&mut rng::stream(seed, &[rng::TAG_BATCH, it as u64]), n, batch).into_vec();
        let mut policy = cfg.augment.clone();
        policy.seed = rng::derive(seed, &[rng::TAG_AUGMENT, policy.seed, it as u64]);
        let mut views: Vec<AugmentedView> = Vec::with_capacity(batch * p.views);
        for &i in &picked {
            views.extend(if cfg.ablation.augmentation {
                sample_views(&signals[i], &policy, i, p.views)?
            } else {
                identity_views(&signals[i], &policy, i, p.views)?
            });
        }
        let windows: Vec<&[f64]> = views.iter().map(|v| v.signal.samples()).collect();
        let pseudo: Vec<usize> = views.iter().map(|v| v.source_index).collect();

        let pooled_t = encode_branch(&params, m, Branch::Time, &branch_input(Branch::Time, &windows, m)?, None)?;
        let mut instance = cls_loss(&linear_head(&pooled_t, &params, &Branch::Time.instance_head())?, &pseudo)?;
        let mut align = Tensor::scalar(0.0);
        let mut extra = Tensor::scalar(0.0);
        if cfg.ablation.freq_task {
            let pooled_f = encode_branch(&params, m, Branch::Freq, &branch_input(Branch::Freq, &windows, m)?, None)?;
            instance = instance.add(&cls_loss(&linear_head(&pooled_f, &params, &Branch::Freq.instance_head())?, &pseudo)?)?;
            let z_t = project(&pooled_t, &params, &Branch::Time.projection())?;
            let z_f = project(&pooled_f, &params, &Branch::Freq.projection())?;
            align = align_loss(&z_t, &z_f, cfg.loss.stop_target)?;
            if cfg.loss.cross_corr > 0.0 && windows.len() >= 2 {
                extra = cross_corr_loss(&z_t, &z_f, cfg.loss.cross_corr_off_diag)?.scale(cfg.loss.cross_corr);
            }
        }
        let loss = align.add(&instance.scale(p.instance_weight))?.add(&extra)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss is {} at iteration {it}", loss.item())));
        }
        let grads = params.grad_of(&loss)?;
        params = opt.apply(&params, &grads)?;
        curves.0.values.push(loss.item());
        curves.1.values.push(align.item());
        curves.2.values.push(instance.item());
    }

    let mut checkpoint = Checkpoint::new(strip_instance_heads(&params));
    checkpoint.norm = Some(data.stats.clone());
    checkpoint.step = p.iterations as u64;
    checkpoint.config = Some(cfg.to_toml()?);
    Ok(PretrainOutcome { checkpoint, loss: curves.0, align: curves.1, instance: curves.2 })
}

/// Supervised loss over a fixed pool of labeled windows.
pub struct LabeledPool<'a> {
    pub model: &'a ModelConfig,
    pub windows: Vec<&'a [f64]>,
    pub weights: LossWeights,
    pub freq_task: bool,
}

/// Logits used for prediction, plus the pieces of the training loss.
struct PoolForward {
    logits: Tensor,
    parts: LossParts,
}

impl LabeledPool<'_> {
    fn forward(&self, params: &ModelParams, windows: &[&[f64]], labels: Option<&[usize]>) -> Result<(PoolForward, Tensor)> {
        let m = self.model;
        let pooled_t = encode_branch(params, m, Branch::Time, &branch_input(Branch::Time, windows, m)?, None)?;
        let logits_t = linear_head(&pooled_t, params, &Branch::Time.classifier())?;
        let z_t = project(&pooled_t, params, &Branch::Time.projection())?;
        let mut parts = LossParts::zeros();
        let mut logits = logits_t.clone();
        if let Some(l) = labels {
            parts.cls_time = cls_loss(&logits_t, l)?;
        }
        if self.freq_task {
            let pooled_f = encode_branch(params, m, Branch::Freq, &branch_input(Branch::Freq, windows, m)?, None)?;
            let logits_f = linear_head(&pooled_f, params, &Branch::Freq.classifier())?;
            logits = logits.add(&logits_f)?;
            if let Some(l) = labels {
                parts.cls_freq = cls_loss(&logits_f, l)?;
                let z_f = project(&pooled_f, params, &Branch::Freq.projection())?;
                parts.align = align_loss(&z_t, &z_f, self.weights.stop_target)?;
            }
        }
        Ok((PoolForward { logits, parts }, z_t))
    }
}

impl TaskLoss for LabeledPool<'_> {
    fn evaluate(&self, params: &ModelParams, items: &[usize], labels: &[usize]) -> Result<TaskEval> {
        let windows: Vec<&[f64]> = items.iter().map(|&i| self.windows[i]).collect();
        let (out, _) = self.forward(params, &windows, Some(labels))?;
        let mut w = self.weights.clone();
        if !self.freq_task {
            w.cls_freq = 0.0;
        }
        let loss = final_loss(&out.parts, &w)?;
        let pred = out.logits.argmax_rows()?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(TaskEval { loss, accuracy: Some(hits as f64 / labels.len() as f64) })
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub loss: Curve,
    pub accuracy: Curve,
    /// Training-window indices that carried labels.
    pub labeled: Vec<usize>,
}

/// Episode shape that fits the smallest labeled class.
fn episode_shape(meta: &MetaConfig, smallest: usize) -> (usize, usize) {
    let k = meta.k_shot.min(smallest.saturating_sub(1).max(1));
    (k, meta.query.min(smallest - k))
}

/// Inner rates: `inner_lr` for the classifier, scaled by the
/// backbone/classifier ratio elsewhere, unless rates were given explicitly.
fn meta_with_group_rates(meta: &MetaConfig, classifier: f64, backbone: f64) -> MetaConfig {
    let mut out = meta.clone();
    if out.inner_group_rates.is_empty() {
        out.inner_group_rates = vec![(CLASSIFIER_PREFIX.to_string(), meta.inner_lr)];
        out.inner_lr = meta.inner_lr * backbone / classifier;
    }
    out
}

/// Supervised stage on a stratified label budget of the training windows.
pub fn finetune(cfg: &RunConfig, data: &PreparedData, pretrained: &Checkpoint) -> Result<FinetuneOutcome> {
    let seed = cfg.run.seed;
    let f = &cfg.finetune;
    let labeled = label_budget(&data.train, f.label_budget, rng::derive(seed, &[rng::TAG_BUDGET]))?;
    let labels: Vec<usize> = labeled.iter().map(|&i| data.train.windows[i].label.expect("budget picks labeled windows")).collect();
    let pool = LabeledPool {
        model: &cfg.model,
        windows: data.train.select(&labeled),
        weights: cfg.loss.clone(),
        freq_task: cfg.ablation.freq_task,
    };
    let rates = f.rates_for(f.label_budget)?;
    let mut sgd = SgdState::new(rates.backbone, f.momentum, f.weight_decay).with_group_rate(CLASSIFIER_PREFIX, rates.classifier);
    let params = strip_instance_heads(&pretrained.params);
    let mut loss_curve = Curve::new("finetune_loss");
    let mut acc_curve = Curve::new("finetune_accuracy");

    let tuned = if cfg.ablation.bilevel {
        let meta = meta_with_group_rates(&cfg.meta, rates.classifier, rates.backbone);
        let mut counts = vec![0usize; cfg.model.n_classes];
        labels.iter().for_each(|&l| counts[l] += 1);
        let smallest = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
        let present = counts.iter().filter(|&&c| c > 0).count();
        let (k_shot, query) = episode_shape(&meta, smallest);
        let source = EpisodeSource { labels: &labels, n_way: meta.n_way.unwrap_or(present).min(present), k_shot, query };
        let mut outer = OuterOptimizer::Sgd { state: sgd, grad_scale: cfg.loss.meta / meta.tasks_per_batch as f64 };
        let (theta, history) = meta_train(&pool, &source, &params, &meta, f.iterations, rng::derive(seed, &[rng::TAG_TASKS]), &mut outer)?;
        for h in history {
            loss_curve.values.push(h.query_loss);
            acc_curve.values.push(h.query_accuracy.unwrap_or(f64::NAN));
        }
        let all: Vec<usize> = (0..labeled.len()).collect();
        inner_adapt(&pool, &theta, &all, &labels, &meta)?.fresh_leaves()
    } else {
        let all: Vec<usize> = (0..labeled.len()).collect();
        let mut theta = params;
        for it in 0..f.iterations {
            let eval = pool.evaluate(&theta, &all, &labels)?;
            if !eval.loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss is {} at iteration {it}", eval.loss.item())));
            }
            let grads = theta.grad_of(&eval.loss)?;
            theta = sgd.apply(&theta, &grads)?;
            loss_curve.values.push(eval.loss.item());
            acc_curve.values.push(eval.accuracy.unwrap_or(f64::NAN));
        }
        theta
    };

    let mut checkpoint = Checkpoint::new(tuned);
    checkpoint.norm = pretrained.norm.clone().or_else(|| Some(data.stats.clone()));
    checkpoint.step = pretrained.step + f.iterations as u64;
    checkpoint.config = Some(cfg.to_toml()?);
    Ok(FinetuneOutcome { checkpoint, loss: loss_curve, accuracy: acc_curve, labeled })
}

/// Predicted classes and time-branch embeddings, computed without recording.
pub fn predict(params: &ModelParams, cfg: &RunConfig, windows: &[&[f64]]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let _off = no_grad();
    let pool = LabeledPool { model: &cfg.model, windows: vec![], weights: cfg.loss.clone(), freq_task: cfg.ablation.freq_task };
    let mut pred = Vec::with_capacity(windows.len());
    let mut emb = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let (out, z_t) = pool.forward(params, chunk, None)?;
        if !out.logits.is_finite() {
            return Err(Error::Numeric("non-finite logits during evaluation".into()));
        }
        pred.extend(out.logits.argmax_rows()?);
        let (rows, _) = z_t.dims2()?;
        emb.extend((0..rows).map(|r| z_t.row(r).to_vec()));
    }
    Ok((pred, emb))
}

#[derive(Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<usize>,
    pub truth: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Score the test split, and with `corrupted` also a corrupted copy of it
/// (noise and masking in raw units, then the checkpoint's normalization).
pub fn evaluate(cfg: &RunConfig, data: &PreparedData, ck: &Checkpoint, corrupted: bool) -> Result<Evaluation> {
    let stats = ck.norm.clone().unwrap_or_else(|| data.stats.clone());
    let test = stats.apply(&data.test_raw);
    let truth = test.labels()?;
    let (predictions, embeddings) = predict(&ck.params, cfg, &test.slices())?;
    let clean = Scores::compute(&predictions, &truth, cfg.model.n_classes)?;
    let corrupted = if corrupted {
        let e = &cfg.eval;
        let (bad, _) = corrupt(&data.test_raw, e.noise_fraction, e.noise_variance, e.mask_fraction, rng::derive(cfg.run.seed, &[rng::TAG_CORRUPT]))?;
        let (pred, _) = predict(&ck.params, cfg, &stats.apply(&bad).slices())?;
        Some(Scores::compute(&pred, &truth, cfg.model.n_classes)?)
    } else {
        None
    };
    Ok(Evaluation { report: MetricsReport { test_windows: truth.len(), clean, corrupted }, predictions, truth, embeddings })
}

/// `label,prediction,z0,z1,…` per test window.
pub fn embeddings_csv(ev: &Evaluation) -> String {
    let dims = ev.embeddings.first().map_or(0, Vec::len);
    let mut s = String::from("label,prediction");
    for j in 0..dims {
        s.push_str(&format!(",z{j}"));
    }
    s.push('\n');
    for ((t, p), z) in ev.truth.iter().zip(&ev.predictions).zip(&ev.embeddings) {
        s.push_str(&format!("{t},{p}"));
        for v in z {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Everything a full pretrain → fine-tune → evaluate run produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub pretrained: PretrainOutcome,
    pub finetuned: FinetuneOutcome,
    pub evaluation: Evaluation,
}

pub fn run_all(cfg: &RunConfig, data: &PreparedData, corrupted: bool) -> Result<RunOutcome> {
    let pretrained = pretrain(cfg, data)?;
    let finetuned = finetune(cfg, data, &pretrained.checkpoint)?;
    let evaluation = evaluate(cfg, data, &finetuned.checkpoint, corrupted)?;
    Ok(RunOutcome { pretrained, finetuned, evaluation })
}

pub fn write_curves(dir: &Path, curves: &[&Curve]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in curves {
        c.save(dir)?;
    }
    Ok(())
}
