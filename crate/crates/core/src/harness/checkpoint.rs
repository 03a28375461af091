//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"MMTFDCKP"`, version `u32`, entry count `u64`, then per entry the name
//! length `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64` and the
//! values as `f64`. A trailer follows: a `u64` byte length and that many
//! bytes of TOML config snapshot (length 0 when absent).
//!
//! Normalization statistics and the training step travel as entries under
//! the reserved `meta.` prefix.

use std::fs;
use std::path::Path;

use crate::datapipe::{NormMode, NormStats};
use crate::error::{Error, Result};
use crate::tensor::{ModelParams, Tensor};

pub const MAGIC: &[u8; 8] = b"MMTFDCKP";
pub const VERSION: u32 = 1;

const RESERVED: &str = "meta.";
const NORM_KEY: &str = "meta.norm";
const STEP_KEY: &str = "meta.step";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub norm: Option<NormStats>,
    pub step: u64,
    pub config: Option<String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Checkpoint {
        Checkpoint { params, norm: None, step: 0, config: None }
    }

    /// Bit-exact equality of every stored field.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.params.bit_eq(&other.params) && self.norm == other.norm && self.step == other.step && self.config == other.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (name, t) in self.params.iter() {
            if name.starts_with(RESERVED) {
                return Err(Error::Contract(format!("parameter name `{name}` uses the reserved `{RESERVED}` prefix")));
            }
            entries.push((name.clone(), t.shape().to_vec(), t.to_vec()));
        }
        if let Some(n) = &self.norm {
            let mode = match n.mode {
                NormMode::Global => 0.0,
                NormMode::PerWindow => 1.0,
            };
            entries.push((NORM_KEY.into(), vec![4], vec![mode, n.mean, n.std, f64::from(u8::from(n.std_substituted))]));
        }
        entries.push((STEP_KEY.into(), vec![1], vec![self.step as f64]));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, dims, values) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cfg = self.config.as_deref().unwrap_or("").as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u64()?;
        let mut ck = Checkpoint::new(ModelParams::new());
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format(format!("`{name}`: shape overflows")))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Format(format!("`{name}`: truncated payload")));
            }
            let values: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            match name.as_str() {
                NORM_KEY => {
                    let [mode, mean, std, flag] = values[..] else {
                        return Err(Error::Format("normalization entry must hold 4 values".into()));
                    };
                    let mode = if mode == 0.0 { NormMode::Global } else { NormMode::PerWindow };
                    ck.norm = Some(NormStats { mode, mean, std, std_substituted: flag != 0.0 });
                }
                STEP_KEY => ck.step = values.first().copied().unwrap_or(0.0) as u64,
                _ if name.starts_with(RESERVED) => {}
                _ => ck.params.insert(name.clone(), Tensor::param(values, &dims).map_err(|e| Error::Format(format!("`{name}`: {e}")))?),
            }
        }
        let cfg_len = r.u64()? as usize;
        if cfg_len > r.remaining() {
            return Err(Error::Format("truncated config trailer".into()));
        }
        let cfg = r.take(cfg_len)?;
        if !cfg.is_empty() {
            ck.config = Some(String::from_utf8(cfg.to_vec()).map_err(|_| Error::Format("config trailer is not UTF-8".into()))?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
