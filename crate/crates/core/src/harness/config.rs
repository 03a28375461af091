//! Run configuration, one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::datapipe::{NormMode, SynthSpec};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::model::ModelConfig;
use crate::objective::LossWeights;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugPolicy,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of recorded signals; when absent the synthetic generator is used.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    pub synth_records: usize,
    pub window: usize,
    pub step: usize,
    pub split_ratio: f64,
    pub norm: NormMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthSpec::default(),
            synth_records: 3,
            window: 2048,
            step: 850,
            split_ratio: 0.7,
            norm: NormMode::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub views: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the instance-discrimination loss over pseudo-labels.
    pub instance_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 300, batch_size: 16, views: 5, learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-4, instance_weight: 1.0 }
    }
}

/// Classifier and backbone rates for one label budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetRates {
    pub budget: f64,
    pub classifier: f64,
    pub backbone: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub label_budget: f64,
    /// Outer steps (meta-iterations, or plain SGD steps when bi-level is off).
    pub iterations: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The entry whose budget is closest (in log scale) to `label_budget` wins.
    pub rates: Vec<BudgetRates>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            label_budget: 0.01,
            iterations: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
            rates: vec![
                BudgetRates { budget: 0.01, classifier: 0.05, backbone: 1e-4 },
                BudgetRates { budget: 0.1, classifier: 1.0, backbone: 0.01 },
            ],
        }
    }
}

impl FinetuneConfig {
    pub fn rates_for(&self, budget: f64) -> Result<BudgetRates> {
        self.rates
            .iter()
            .copied()
            .min_by(|a, b| (a.budget.ln() - budget.ln()).abs().total_cmp(&(b.budget.ln() - budget.ln()).abs()))
            .ok_or_else(|| Error::Config("finetune.rates is empty".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub bilevel: bool,
    pub freq_task: bool,
    pub augmentation: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { bilevel: true, freq_task: true, augmentation: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise_fraction: f64,
    pub noise_variance: f64,
    pub mask_fraction: f64,
    pub export_embeddings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { noise_fraction: 0.5, noise_variance: 10.0, mask_fraction: 0.05, export_embeddings: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("runs/default") }
    }
}

fn config_err(section: &str, e: Error) -> Error {
    Error::Config(format!("[{section}] {}", e.to_string().trim_start_matches("contract violation: ")))
}

fn positive(section: &str, name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("[{section}] {name} must be positive, got {v}")))
    }
}

fn unit_interval(section: &str, name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("[{section}] {name} must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; a relative manifest path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.manifest.is_none() {
            d.synth.validate().map_err(|e| config_err("data.synth", e))?;
            if d.synth.n_classes() != self.model.n_classes {
                return Err(Error::Config(format!(
                    "[data.synth] {} classes but [model] n_classes = {}",
                    d.synth.n_classes(),
                    self.model.n_classes
                )));
            }
            if d.synth_records == 0 {
                return Err(Error::Config("[data] synth_records must be at least 1".into()));
            }
        }
        if d.window == 0 || d.step == 0 {
            return Err(Error::Config("[data] window and step must be at least 1".into()));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::Config(format!("[data] split_ratio must lie strictly between 0 and 1, got {}", d.split_ratio)));
        }
        self.augment.validate().map_err(|e| config_err("augment", e))?;
        if self.augment.ops.is_empty() && self.ablation.augmentation {
            return Err(Error::Config("[augment] ops is empty; disable [ablation] augmentation instead".into()));
        }
        let view_len = self.augment.crop_len.unwrap_or(d.window).min(d.window);
        if view_len != self.model.input_len {
            return Err(Error::Config(format!("[model] input_len {} does not match the {view_len}-sample views", self.model.input_len)));
        }
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.loss.validate().map_err(|e| config_err("loss", e))?;
        self.meta.validate().map_err(|e| config_err("meta", e))?;
        let p = &self.pretrain;
        if p.batch_size == 0 || p.views == 0 {
            return Err(Error::Config("[pretrain] batch_size and views must be at least 1".into()));
        }
        positive("pretrain", "learning_rate", p.learning_rate)?;
        unit_interval("pretrain", "momentum", p.momentum)?;
        if !(p.weight_decay >= 0.0 && p.instance_weight >= 0.0) {
            return Err(Error::Config("[pretrain] weight_decay and instance_weight must be nonnegative".into()));
        }
        let f = &self.finetune;
        if !(f.label_budget > 0.0 && f.label_budget <= 1.0) {
            return Err(Error::Config(format!("[finetune] label_budget must lie in (0, 1], got {}", f.label_budget)));
        }
        unit_interval("finetune", "momentum", f.momentum)?;
        if !(f.weight_decay >= 0.0) {
            return Err(Error::Config("[finetune] weight_decay must be nonnegative".into()));
        }
        if f.rates.is_empty() {
            return Err(Error::Config("[finetune] rates is empty".into()));
        }
        for r in &f.rates {
            positive("finetune.rates", "budget", r.budget)?;
            positive("finetune.rates", "classifier", r.classifier)?;
            positive("finetune.rates", "backbone", r.backbone)?;
        }
        let e = &self.eval;
        unit_interval("eval", "noise_fraction", e.noise_fraction)?;
        unit_interval("eval", "mask_fraction", e.mask_fraction)?;
        if !(e.noise_variance >= 0.0 && e.noise_variance.is_finite()) {
            return Err(Error::Config("[eval] noise_variance must be nonnegative".into()));
        }
        Ok(())
    }
}
