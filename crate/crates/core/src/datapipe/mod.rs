//! Records, overlapping windows, stratified splits, normalization and the
//! corruption protocol used for robustness evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::error::{contract_err, Error, Result};
use crate::rng;
use crate::spectral::Signal;

mod manifest;
mod synth;

pub use manifest::{load_manifest, write_records, ManifestEntry, RecordFormat};
pub use synth::{synth_generate, SynthSpec};

/// One long acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub label: Option<usize>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub samples: Vec<f64>,
    pub label: Option<usize>,
    /// Index of the record the window was cut from.
    pub record: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub windows: Vec<Window>,
    pub sample_rate: f64,
    pub tag: SplitTag,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_len(&self) -> Option<usize> {
        self.windows.first().map(|w| w.samples.len())
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.windows.iter().map(|w| w.samples.as_slice()).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.windows[i].samples.as_slice()).collect()
    }

    /// Labels of every window; fails if any window is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.windows
            .iter()
            .enumerate()
            .map(|(i, w)| w.label.ok_or_else(|| Error::Contract(format!("window {i} has no label"))))
            .collect()
    }

    /// Window indices per label (unlabeled windows under `None`).
    pub fn by_class(&self) -> BTreeMap<Option<usize>, Vec<usize>> {
        let mut out: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, w) in self.windows.iter().enumerate() {
            out.entry(w.label).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> WindowDataset {
        WindowDataset {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            sample_rate: self.sample_rate,
            tag,
        }
    }

    pub fn concat(parts: Vec<WindowDataset>) -> Result<WindowDataset> {
        let Some(first) = parts.first() else {
            return contract_err("nothing to concatenate");
        };
        let (rate, tag) = (first.sample_rate, first.tag);
        let mut windows = Vec::new();
        for p in parts {
            if p.sample_rate != rate {
                return contract_err(format!("sample rates differ: {rate} vs {}", p.sample_rate));
            }
            windows.extend(p.windows);
        }
        let ds = WindowDataset { windows, sample_rate: rate, tag };
        if let Some(w) = ds.window_len() {
            if ds.windows.iter().any(|x| x.samples.len() != w) {
                return contract_err("windows have different lengths");
            }
        }
        Ok(ds)
    }
}

/// `⌊(T − W)/S⌋ + 1` for `T ≥ W`, otherwise 0.
pub fn window_count(len: usize, window: usize, step: usize) -> usize {
    if window == 0 || step == 0 || len < window {
        return 0;
    }
    (len - window) / step + 1
}

/// Cut windows of length `window` at offsets `0, step, 2·step, …`.
pub fn overlap_sample(rec: &SignalRecord, record_index: usize, window: usize, step: usize) -> Result<WindowDataset> {
    if window == 0 || step == 0 {
        return contract_err("window and step must be at least 1");
    }
    if rec.samples.len() < window {
        return Err(Error::Capacity(format!(
            "record `{}` has {} samples, shorter than the {window}-sample window",
            rec.source,
            rec.samples.len()
        )));
    }
    let windows = (0..window_count(rec.samples.len(), window, step))
        .map(|i| {
            let offset = i * step;
            Window { samples: rec.samples[offset..offset + window].to_vec(), label: rec.label, record: record_index, offset }
        })
        .collect();
    Ok(WindowDataset { windows, sample_rate: rec.sample_rate, tag: SplitTag::All })
}

/// Window every record and concatenate.
pub fn overlap_sample_all(records: &[SignalRecord], window: usize, step: usize) -> Result<WindowDataset> {
    let parts = records
        .iter()
        .enumerate()
        .map(|(i, r)| overlap_sample(r, i, window, step))
        .collect::<Result<Vec<_>>>()?;
    WindowDataset::concat(parts)
}

/// Stratified split: each class keeps `round(ratio·n)` windows for training.
/// Window order within each side follows the input order.
pub fn split(ds: &WindowDataset, ratio: f64, seed: u64) -> Result<(WindowDataset, WindowDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return contract_err(format!("split ratio must lie strictly between 0 and 1, got {ratio}"));
    }
    if ds.is_empty() {
        return Err(Error::Capacity("cannot split an empty dataset".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in ds.by_class() {
        let key = class.map_or(u64::MAX, |c| c as u64);
        idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT, key]));
        let n_train = (ratio * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train, SplitTag::Train), ds.subset(&test, SplitTag::Test)))
}

/// Stratified labeled subset: `round(fraction·n_c)` windows of every class.
pub fn label_budget(ds: &WindowDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return contract_err(format!("label budget must lie in (0, 1], got {fraction}"));
    }
    let mut picked = Vec::new();
    for (class, mut idx) in ds.by_class() {
        let Some(class) = class else { continue };
        let take = (fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Capacity(format!(
                "class {class}: a {fraction} budget of {} windows leaves no labeled sample",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[rng::TAG_BUDGET, class as u64]));
        picked.extend_from_slice(&idx[..take]);
    }
    if picked.is_empty() {
        return Err(Error::Capacity("dataset has no labeled windows".into()));
    }
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Global,
    PerWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub mean: f64,
    pub std: f64,
    /// The measured std was zero and 1 was used instead.
    pub std_substituted: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn guarded(std: f64) -> (f64, bool) {
    if std > 0.0 {
        (std, false)
    } else {
        (1.0, true)
    }
}

impl NormStats {
    /// Statistics of a training set. Per-window mode records no global
    /// values; each window is standardized by its own moments.
    pub fn fit(train: &WindowDataset, mode: NormMode) -> Result<NormStats> {
        if train.is_empty() {
            return Err(Error::Capacity("cannot fit normalization on an empty dataset".into()));
        }
        match mode {
            NormMode::Global => {
                let (mean, std) = mean_std(train.windows.iter().flat_map(|w| w.samples.iter().copied()));
                let (std, std_substituted) = guarded(std);
                Ok(NormStats { mode, mean, std, std_substituted })
            }
            NormMode::PerWindow => {
                let std_substituted = train.windows.iter().any(|w| mean_std(w.samples.iter().copied()).1 == 0.0);
                Ok(NormStats { mode, mean: 0.0, std: 1.0, std_substituted })
            }
        }
    }

    pub fn apply_window(&self, x: &[f64]) -> Vec<f64> {
        let (mean, std) = match self.mode {
            NormMode::Global => (self.mean, self.std),
            NormMode::PerWindow => {
                let (m, s) = mean_std(x.iter().copied());
                (m, guarded(s).0)
            }
        };
        x.iter().map(|v| (v - mean) / std).collect()
    }

    pub fn apply(&self, ds: &WindowDataset) -> WindowDataset {
        let mut out = ds.clone();
        for w in &mut out.windows {
            w.samples = self.apply_window(&w.samples);
        }
        out
    }

    /// Undo `apply`; only global statistics are invertible.
    pub fn invert(&self, ds: &WindowDataset) -> Result<WindowDataset> {
        if self.mode != NormMode::Global {
            return contract_err("per-window normalization keeps no statistics to invert");
        }
        let mut out = ds.clone();
        for w in &mut out.windows {
            w.samples.iter_mut().for_each(|v| *v = *v * self.std + self.mean);
        }
        Ok(out)
    }
}

/// Fit on `train` and apply to both splits.
pub fn normalize(train: &WindowDataset, test: &WindowDataset, mode: NormMode) -> Result<(WindowDataset, WindowDataset, NormStats)> {
    let stats = NormStats::fit(train, mode)?;
    Ok((stats.apply(train), stats.apply(test), stats))
}

/// The `⌊fraction·n⌋` window indices that receive additive noise.
pub fn noisy_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction * n as f64).floor() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_CORRUPT]));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Add `𝒩(0, variance)` to a seeded `noise_fraction` of the windows and
/// zero a random contiguous band of `mask_fraction` of the spectrum in
/// every window. Returns the corrupted set and the indices that got noise.
pub fn corrupt(ds: &WindowDataset, noise_fraction: f64, variance: f64, mask_fraction: f64, seed: u64) -> Result<(WindowDataset, Vec<usize>)> {
    for (name, f) in [("noise fraction", noise_fraction), ("mask fraction", mask_fraction)] {
        if !(0.0..=1.0).contains(&f) {
            return contract_err(format!("{name} must lie in [0, 1], got {f}"));
        }
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return contract_err(format!("noise variance must be nonnegative, got {variance}"));
    }
    let noisy = noisy_indices(ds.len(), noise_fraction, seed);
    let mut out = ds.clone();
    if variance > 0.0 {
        let normal = Normal::new(0.0, variance.sqrt()).expect("validated variance");
        for &i in &noisy {
            let mut r = rng::stream(seed, &[rng::TAG_CORRUPT, 1, i as u64]);
            out.windows[i].samples.iter_mut().for_each(|v| *v += normal.sample(&mut r));
        }
    }
    if mask_fraction > 0.0 {
        for (i, w) in out.windows.iter_mut().enumerate() {
            let sig = Signal::new(std::mem::take(&mut w.samples), ds.sample_rate)?;
            w.samples = augment::freq_mask(&sig, mask_fraction, rng::derive(seed, &[rng::TAG_CORRUPT, 2, i as u64]))?.into_samples();
        }
    }
    Ok((out, noisy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(len: usize, label: usize) -> SignalRecord {
        SignalRecord { samples: (0..len).map(|i| i as f64).collect(), sample_rate: 6000.0, label: Some(label), source: format!("r{label}") }
    }

    fn labeled(per_class: usize, classes: usize) -> WindowDataset {
        let windows = (0..per_class * classes)
            .map(|i| Window { samples: vec![i as f64, (i * 7 % 5) as f64], label: Some(i % classes), record: 0, offset: i })
            .collect();
        WindowDataset { windows, sample_rate: 1.0, tag: SplitTag::All }
    }

    #[test]
    fn window_counts() {
        assert_eq!(overlap_sample(&record(2048, 0), 0, 2048, 850).unwrap().len(), 1);
        assert_eq!(overlap_sample(&record(2898, 0), 0, 2048, 850).unwrap().len(), 2);
        let ds = overlap_sample(&record(183_098, 1), 0, 2048, 850).unwrap();
        assert_eq!(ds.len(), 214);
        assert_eq!(ds.windows[1].samples[0], 850.0);
        assert!(ds.windows.iter().all(|w| w.label == Some(1) && w.samples.len() == 2048));
        assert!(matches!(overlap_sample(&record(2047, 0), 0, 2048, 850), Err(Error::Capacity(_))));
    }

    #[test]
    fn paper_split_sizes() {
        let ds = labeled(214, 3);
        let (train, test) = split(&ds, 0.7, 3).unwrap();
        for c in 0..3 {
            assert_eq!(train.windows.iter().filter(|w| w.label == Some(c)).count(), 150);
            assert_eq!(test.windows.iter().filter(|w| w.label == Some(c)).count(), 64);
        }
        assert_eq!(split(&ds, 0.7, 3).unwrap().0, train);
        assert!(split(&ds, 1.0, 3).is_err());
        assert!(split(&ds, 0.0, 3).is_err());
    }

    #[test]
    fn normalization_moments_and_inverse() {
        let ds = labeled(10, 2);
        let (train, _, stats) = normalize(&ds, &ds, NormMode::Global).unwrap();
        let all: Vec<f64> = train.windows.iter().flat_map(|w| w.samples.clone()).collect();
        let (m, s) = mean_std(all.iter().copied());
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        let back = stats.invert(&train).unwrap();
        for (a, b) in back.windows.iter().zip(&ds.windows) {
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_data_is_flagged() {
        let mut ds = labeled(3, 1);
        ds.windows.iter_mut().for_each(|w| w.samples = vec![4.0; 2]);
        let (train, _, stats) = normalize(&ds, &ds, NormMode::Global).unwrap();
        assert!(stats.std_substituted);
        assert!(train.windows.iter().all(|w| w.samples.iter().all(|v| *v == 0.0)));
        let per = NormStats::fit(&ds, NormMode::PerWindow).unwrap();
        assert!(per.std_substituted);
        assert!(per.apply(&ds).windows.iter().all(|w| w.samples.iter().all(|v| *v == 0.0)));
        assert!(per.invert(&ds).is_err());
    }

    #[test]
    fn budget_is_stratified() {
        let ds = labeled(150, 3);
        let idx = label_budget(&ds, 0.01, 0).unwrap();
        assert_eq!(idx.len(), 6);
        for c in 0..3 {
            assert_eq!(idx.iter().filter(|&&i| ds.windows[i].label == Some(c)).count(), 2);
        }
        assert_eq!(label_budget(&ds, 0.1, 0).unwrap().len(), 45);
        assert_eq!(label_budget(&ds, 1.0, 0).unwrap().len(), 450);
        assert!(matches!(label_budget(&labeled(20, 3), 0.01, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn corruption_contract() {
        let windows = (0..10)
            .map(|i| Window { samples: (0..2048).map(|t| ((t * (i + 1)) as f64 * 0.01).sin()).collect(), label: Some(0), record: 0, offset: 0 })
            .collect();
        let ds = WindowDataset { windows, sample_rate: 6000.0, tag: SplitTag::Test };
        let (same, noisy) = corrupt(&ds, 0.0, 10.0, 0.0, 1).unwrap();
        assert_eq!(same, ds);
        assert!(noisy.is_empty());

        let (out, noisy) = corrupt(&ds, 0.5, 10.0, 0.0, 1).unwrap();
        assert_eq!(noisy.len(), 5);
        let changed: Vec<usize> = (0..10).filter(|&i| out.windows[i] != ds.windows[i]).collect();
        assert_eq!(changed, noisy);
        // a single window's sample variance has relative std √(2/W) ≈ 3%
        let band = 5.0 * (2.0f64 / 2048.0).sqrt() * 10.0;
        let mut pooled = Vec::new();
        for &i in &noisy {
            let diff: Vec<f64> = out.windows[i].samples.iter().zip(&ds.windows[i].samples).map(|(a, b)| a - b).collect();
            let (_, s) = mean_std(diff.iter().copied());
            assert!((s * s - 10.0).abs() <= band, "window {i}: variance {}", s * s);
            pooled.extend(diff);
        }
        let (_, s) = mean_std(pooled.iter().copied());
        assert!((9.5..=10.5).contains(&(s * s)), "pooled variance {}", s * s);
        assert_eq!(corrupt(&ds, 0.5, 10.0, 0.05, 1).unwrap(), corrupt(&ds, 0.5, 10.0, 0.05, 1).unwrap());
        assert!(corrupt(&ds, 1.5, 10.0, 0.0, 1).is_err());
    }
}
