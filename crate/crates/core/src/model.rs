//! Two-branch multi-attention transformer encoder.
//!
//! A batch of `N` windows is carried as one `[N·L, d]` matrix: row block `i`
//! holds the `L` patch tokens of window `i`. Linear maps act on the whole
//! stack at once; attention and pooling work per block.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::rng;
use crate::spectral::magnitude_spectrum;
use crate::tensor::{init, ModelParams, Tensor};

/// Prefix shared by the classifier parameters (`cls_t.*`, `cls_f.*`).
pub const CLASSIFIER_PREFIX: &str = "cls_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Samples per input window.
    pub input_len: usize,
    pub patch: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub heads: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub ff_mult: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 2048,
            patch: 128,
            d_model: 64,
            d_proj: 32,
            heads: 4,
            depth: 2,
            n_classes: 3,
            ff_mult: 4,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Tokens per window, `⌈T/P⌉`.
    pub fn seq_len(&self) -> usize {
        self.input_len.div_ceil(self.patch)
    }

    pub fn padded_len(&self) -> usize {
        self.seq_len() * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("d_proj", self.d_proj),
            ("heads", self.heads),
            ("n_classes", self.n_classes),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return contract_err(format!("model.{name} must be positive"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return contract_err("model.ln_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Time,
    Freq,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Time => "t",
            Branch::Freq => "f",
        }
    }

    pub fn encoder(self) -> String {
        format!("enc_{}", self.tag())
    }

    pub fn projection(self) -> String {
        format!("proj_{}", self.tag())
    }

    pub fn classifier(self) -> String {
        format!("{CLASSIFIER_PREFIX}{}", self.tag())
    }

    pub fn instance_head(self) -> String {
        format!("inst_{}", self.tag())
    }
}

struct Init<'a> {
    params: &'a mut ModelParams,
    rng: rand_chacha::ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let t = init::uniform_fan_in(&mut self.rng, shape, fan_in)?;
        self.params.insert(name, t);
        Ok(())
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<()> {
        self.params.insert(name, init::constant(shape, v)?);
        Ok(())
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.uniform(format!("{prefix}.{w}"), &[fan_in, fan_out], fan_in)?;
        self.uniform(format!("{prefix}.{b}"), &[fan_out], fan_in)
    }
}

/// Freshly initialized encoders, projection heads and classifiers.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let (d, p, l) = (cfg.d_model, cfg.patch, cfg.seq_len());
    for branch in [Branch::Time, Branch::Freq] {
        let mut ini = Init {
            params: &mut params,
            rng: rng::stream(seed, &[rng::TAG_INIT, branch as u64]),
        };
        let enc = branch.encoder();
        ini.linear(&format!("{enc}.embed"), "w", "b", p, d)?;
        ini.uniform(format!("{enc}.embed.pos"), &[l, d], d)?;
        for blk in 0..cfg.depth {
            let pre = format!("{enc}.block{blk}");
            for m in 0..cfg.heads {
                ini.uniform(format!("{pre}.attn.q{m}"), &[d, d], d)?;
            }
            ini.uniform(format!("{pre}.attn.wo"), &[d, cfg.heads * d], cfg.heads * d)?;
            ini.constant(format!("{pre}.ln1.g"), &[d], 1.0)?;
            ini.constant(format!("{pre}.ln1.b"), &[d], 0.0)?;
            ini.linear(&format!("{pre}.ff"), "w1", "b1", d, cfg.ff_mult * d)?;
            ini.linear(&format!("{pre}.ff"), "w2", "b2", cfg.ff_mult * d, d)?;
            ini.constant(format!("{pre}.ln2.g"), &[d], 1.0)?;
            ini.constant(format!("{pre}.ln2.b"), &[d], 0.0)?;
        }
        let proj = branch.projection();
        ini.linear(&proj, "w1", "b1", d, d)?;
        ini.linear(&proj, "w2", "b2", d, cfg.d_proj)?;
        ini.linear(&branch.classifier(), "w", "b", d, cfg.n_classes)?;
    }
    Ok(params)
}

/// Linear heads mapping pooled features to `n` pseudo-label logits.
pub fn add_instance_heads(params: &mut ModelParams, cfg: &ModelConfig, n: usize, seed: u64) -> Result<()> {
    for branch in [Branch::Time, Branch::Freq] {
        let mut ini = Init {
            params,
            rng: rng::stream(seed, &[rng::TAG_INIT, 10 + branch as u64]),
        };
        ini.linear(&branch.instance_head(), "w", "b", cfg.d_model, n)?;
    }
    Ok(())
}

/// Query matrices `Q_m ∈ ℝ^{d×d}` and output map `W_o ∈ ℝ^{d×Md}`.
pub struct AttentionParams {
    pub queries: Vec<Tensor>,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn from_params(params: &ModelParams, prefix: &str, heads: usize) -> Result<Self> {
        let queries = (0..heads)
            .map(|m| params.get(&format!("{prefix}.q{m}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let wo = params.get(&format!("{prefix}.wo"))?.clone();
        Ok(Self { queries, wo })
    }
}

/// Per-head `softmax((H·Q_m)·Hᵀ/√d)·H`, concatenated and mapped by `W_o`.
///
/// `h` stacks sequences of `seq_len` rows. Returns the `[rows, d]` output and
/// each head's `[rows, seq_len]` attention weights.
pub fn multi_head_attention(h: &Tensor, p: &AttentionParams, seq_len: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let (rows, d) = h.dims2()?;
    if seq_len == 0 || rows % seq_len != 0 {
        return dim_err(format!("{rows} rows do not split into sequences of {seq_len}"));
    }
    if p.queries.is_empty() {
        return dim_err("attention needs at least one head");
    }
    let (wo_r, wo_c) = p.wo.dims2()?;
    if wo_r != d || wo_c != p.queries.len() * d {
        return dim_err(format!("W_o is {wo_r}x{wo_c}, expected {d}x{}", p.queries.len() * d));
    }
    let groups = rows / seq_len;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(p.queries.len());
    let mut weights = Vec::with_capacity(p.queries.len());
    for q in &p.queries {
        if q.shape() != [d, d] {
            return dim_err(format!("query matrix has shape {:?}, expected [{d}, {d}]", q.shape()));
        }
        let scores = h.matmul(q)?.bmm(h, groups, false, true)?.scale(scale);
        let attn = scores.softmax_rows()?;
        heads.push(attn.bmm(h, groups, false, false)?);
        weights.push(attn);
    }
    let cat = if heads.len() == 1 { heads.remove(0) } else { Tensor::concat_cols(&heads)? };
    Ok((cat.matmul_nt(&p.wo)?, weights))
}

/// Zero-pad each window to `L·P` samples and stack them as `[N, L·P]`.
pub fn stack_windows(windows: &[&[f64]], cfg: &ModelConfig) -> Result<Tensor> {
    if windows.is_empty() {
        return contract_err("empty batch");
    }
    let width = cfg.padded_len();
    let mut data = Vec::with_capacity(windows.len() * width);
    for w in windows {
        if w.len() != cfg.input_len {
            return dim_err(format!("window has {} samples, model expects {}", w.len(), cfg.input_len));
        }
        data.extend_from_slice(w);
        data.resize(data.len() + width - w.len(), 0.0);
    }
    Tensor::new(data, &[windows.len(), width])
}

/// Magnitude spectra scaled by `1/√T`, stacked like `stack_windows`.
pub fn stack_spectra(windows: &[&[f64]], cfg: &ModelConfig) -> Result<Tensor> {
    let mags: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| {
            let scale = 1.0 / (w.len() as f64).sqrt();
            magnitude_spectrum(w).into_iter().map(|m| m * scale).collect()
        })
        .collect();
    let refs: Vec<&[f64]> = mags.iter().map(Vec::as_slice).collect();
    stack_windows(&refs, cfg)
}

/// Patch tokens: non-overlapping length-`P` patches mapped to `d`, plus a
/// learned positional vector per position. `[N, L·P] -> [N·L, d]`.
pub fn embed(x: &Tensor, params: &ModelParams, prefix: &str, cfg: &ModelConfig) -> Result<Tensor> {
    let (n, width) = x.dims2()?;
    if width != cfg.padded_len() {
        return dim_err(format!("input width {width}, expected {}", cfg.padded_len()));
    }
    let l = cfg.seq_len();
    let patches = x.reshape(&[n * l, cfg.patch])?;
    let tokens = patches.linear(params.get(&format!("{prefix}.embed.w"))?, params.get(&format!("{prefix}.embed.b"))?)?;
    tokens.add(&params.get(&format!("{prefix}.embed.pos"))?.tile_rows(n)?)
}

/// Post-norm blocks `{attention → add → norm → FF(relu) → add → norm}`,
/// then mean pooling over each sequence. `[N·L, d] -> [N, d]`.
pub fn transformer_encode(
    h: &Tensor,
    params: &ModelParams,
    prefix: &str,
    cfg: &ModelConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let l = cfg.seq_len();
    let mut x = h.clone();
    for blk in 0..cfg.depth {
        let pre = format!("{prefix}.block{blk}");
        let get = |name: &str| params.get(&format!("{pre}.{name}"));
        let attn = AttentionParams::from_params(params, &format!("{pre}.attn"), cfg.heads)?;
        let (a, weights) = multi_head_attention(&x, &attn, l)?;
        if let Some(t) = trace.as_deref_mut() {
            t.extend(weights);
        }
        x = x.add(&a)?.layer_norm(get("ln1.g")?, get("ln1.b")?, cfg.ln_eps)?;
        let ff = x
            .linear(get("ff.w1")?, get("ff.b1")?)?
            .relu()
            .linear(get("ff.w2")?, get("ff.b2")?)?;
        x = x.add(&ff)?.layer_norm(get("ln2.g")?, get("ln2.b")?, cfg.ln_eps)?;
    }
    x.segment_mean(l)
}

/// Two-layer projection head `G: d → d → d_proj`.
pub fn project(pooled: &Tensor, params: &ModelParams, prefix: &str) -> Result<Tensor> {
    let get = |name: &str| params.get(&format!("{prefix}.{name}"));
    pooled.linear(get("w1")?, get("b1")?)?.relu().linear(get("w2")?, get("b2")?)
}

pub fn linear_head(pooled: &Tensor, params: &ModelParams, prefix: &str) -> Result<Tensor> {
    pooled.linear(params.get(&format!("{prefix}.w"))?, params.get(&format!("{prefix}.b"))?)
}

/// Outputs of one branch for a batch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `[N, d]` pooled encoder features.
    pub pooled: Tensor,
    /// `[N, d_proj]` projected embedding `Z`.
    pub z: Tensor,
    /// `[N, n_classes]` classifier logits.
    pub logits: Tensor,
}

/// Encoder input for a branch: raw windows or their magnitude spectra.
pub fn branch_input(branch: Branch, windows: &[&[f64]], cfg: &ModelConfig) -> Result<Tensor> {
    match branch {
        Branch::Time => stack_windows(windows, cfg),
        Branch::Freq => stack_spectra(windows, cfg),
    }
}

pub fn encode_branch(
    params: &ModelParams,
    cfg: &ModelConfig,
    branch: Branch,
    input: &Tensor,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let enc = branch.encoder();
    let h = embed(input, params, &enc, cfg)?;
    transformer_encode(&h, params, &enc, cfg, trace)
}

pub fn branch_forward(params: &ModelParams, cfg: &ModelConfig, branch: Branch, windows: &[&[f64]]) -> Result<BranchOutput> {
    let input = branch_input(branch, windows, cfg)?;
    let pooled = encode_branch(params, cfg, branch, &input, None)?;
    let z = project(&pooled, params, &branch.projection())?;
    let logits = linear_head(&pooled, params, &branch.classifier())?;
    Ok(BranchOutput { pooled, z, logits })
}

/// Time branch on the raw windows and frequency branch on their magnitude
/// spectra.
pub fn forward_branches(params: &ModelParams, cfg: &ModelConfig, windows: &[&[f64]]) -> Result<(BranchOutput, BranchOutput)> {
    Ok((
        branch_forward(params, cfg, Branch::Time, windows)?,
        branch_forward(params, cfg, Branch::Freq, windows)?,
    ))
}
