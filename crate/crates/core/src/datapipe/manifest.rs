//! Manifest files listing raw record files.
//!
//! ```toml
//! [[record]]
//! path = "class0.f32"
//! label = 0
//! sample_rate = 6000.0
//! ```
//!
//! Paths are relative to the manifest. `f32le` files hold little-endian
//! 32-bit floats; `csv` files hold one sample per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SignalRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    #[default]
    F32le,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub sample_rate: f64,
    #[serde(default)]
    pub format: RecordFormat,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    record: Vec<ManifestEntry>,
}

fn read_f32le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: {} bytes is not a whole number of f32 samples", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn read_csv(path: &Path) -> Result<Vec<f64>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<SignalRecord>> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .record
        .into_iter()
        .map(|e| {
            let file = base.join(&e.path);
            let samples = match e.format {
                RecordFormat::F32le => read_f32le(&file)?,
                RecordFormat::Csv => read_csv(&file)?,
            };
            if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format(format!("{}: sample {i} is not finite", file.display())));
            }
            if !(e.sample_rate > 0.0) {
                return Err(Error::Format(format!("{}: sample rate must be positive", file.display())));
            }
            Ok(SignalRecord { samples, sample_rate: e.sample_rate, label: e.label, source: file.display().to_string() })
        })
        .collect()
}

/// Write each record as `record{i}.f32` plus `manifest.toml` into `dir`.
pub fn write_records(dir: &Path, records: &[SignalRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, r) in records.iter().enumerate() {
        let name = PathBuf::from(format!("record{i}.f32"));
        let bytes: Vec<u8> = r.samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(dir.join(&name), bytes)?;
        manifest.record.push(ManifestEntry { path: name, label: r.label, sample_rate: r.sample_rate, format: RecordFormat::F32le });
    }
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text)?;
    Ok(path)
}
