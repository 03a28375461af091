//! Time- and frequency-domain augmentations and the random policy that
//! composes them into views.
//!
//! Every random draw comes from a stream derived from `(seed, source index,
//! view index)`, so a view does not depend on which other views were drawn.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::rng;
use crate::spectral::{fft_real, ifft_real, Signal};

/// Imaginary residue tolerated after returning to the time domain.
pub const REAL_RESIDUE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Warp,
    Flip,
    TimeNoise,
    FreqMask,
    FreqNoise,
}

impl AugKind {
    pub const ALL: [AugKind; 5] = [AugKind::Warp, AugKind::Flip, AugKind::TimeNoise, AugKind::FreqMask, AugKind::FreqNoise];
}

/// Which augmentations a view may draw, and their parameter ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub ops: Vec<AugKind>,
    /// Chance that each enabled op is drawn for a view.
    pub op_probability: f64,
    /// Range for the warp factor `s` (drawn log-uniformly).
    pub warp_scale: [f64; 2],
    /// Warped segment length as a fraction of the signal length.
    pub warp_segment: [f64; 2],
    /// Time-noise standard deviation relative to the view's own std.
    pub time_noise_rel_sigma: f64,
    /// Spectral-noise standard deviation relative to `std(x)·√T`, the
    /// per-bin scale of white noise with the signal's variance.
    pub freq_noise_rel_sigma: f64,
    pub mask_fraction: [f64; 2],
    /// Contiguous crop length; `None` keeps the whole window.
    pub crop_len: Option<usize>,
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            ops: AugKind::ALL.to_vec(),
            op_probability: 0.5,
            warp_scale: [0.5, 2.0],
            warp_segment: [0.1, 0.5],
            time_noise_rel_sigma: 0.05,
            freq_noise_rel_sigma: 0.05,
            mask_fraction: [0.05, 0.15],
            crop_len: None,
            seed: 0,
        }
    }
}

impl AugPolicy {
    pub fn only(ops: &[AugKind], seed: u64) -> Self {
        Self { ops: ops.to_vec(), seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [s_lo, s_hi] = self.warp_scale;
        if !(s_lo > 0.0 && s_hi >= s_lo && s_hi.is_finite()) {
            return contract_err(format!("warp scale range {:?} must lie in (0, ∞)", self.warp_scale));
        }
        let [g_lo, g_hi] = self.warp_segment;
        if !(g_lo > 0.0 && g_hi >= g_lo && g_hi <= 1.0) {
            return contract_err(format!("warp segment range {:?} must lie in (0, 1]", self.warp_segment));
        }
        if !(self.time_noise_rel_sigma >= 0.0 && self.freq_noise_rel_sigma >= 0.0) {
            return contract_err("noise levels must be nonnegative");
        }
        let [m_lo, m_hi] = self.mask_fraction;
        if !(m_lo >= 0.0 && m_hi >= m_lo && m_hi <= 1.0) {
            return contract_err(format!("mask fraction range {:?} must lie in [0, 1]", self.mask_fraction));
        }
        if !(0.0..=1.0).contains(&self.op_probability) {
            return contract_err("op probability must lie in [0, 1]");
        }
        if self.crop_len == Some(0) {
            return contract_err("crop length must be positive");
        }
        Ok(())
    }
}

/// One drawn augmentation with the parameters it used.
#[derive(Clone, Debug, PartialEq)]
pub enum AppliedOp {
    Crop { start: usize, len: usize },
    Warp { start: usize, end: usize, scale: f64 },
    Flip,
    TimeNoise { sigma: f64, seed: u64 },
    FreqMask { fraction: f64, seed: u64 },
    FreqNoise { sigma: f64, seed: u64 },
}

/// A view of one source window; `source_index` is its pseudo-label.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub signal: Signal,
    pub source_index: usize,
    pub applied: Vec<AppliedOp>,
}

/// Linear interpolation of `x` at fractional position `pos`.
fn lerp_at(x: &[f64], pos: f64) -> f64 {
    let last = x.len() - 1;
    let pos = pos.clamp(0.0, last as f64);
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 || i == last {
        x[i]
    } else {
        x[i] * (1.0 - frac) + x[i + 1] * frac
    }
}

/// Linearly resample `x` onto `len` evenly spaced points spanning it.
pub fn resample_linear(x: &[f64], len: usize) -> Vec<f64> {
    if len == x.len() {
        return x.to_vec();
    }
    if len == 1 || x.len() == 1 {
        return vec![x[0]; len];
    }
    let ratio = (x.len() - 1) as f64 / (len - 1) as f64;
    (0..len).map(|i| lerp_at(x, i as f64 * ratio)).collect()
}

/// Stretch (`s > 1`) or compress (`s < 1`) the segment `[start, end)`.
///
/// The segment is replaced by `round(s·(end − start))` interpolated points
/// sampled at `start + j/s`; the spliced signal is then resampled back to
/// the original length.
pub fn window_warp(x: &Signal, start: usize, end: usize, scale: f64) -> Result<Signal> {
    let n = x.len();
    if !(start < end && end <= n) {
        return contract_err(format!("warp segment [{start}, {end}) invalid for length {n}"));
    }
    if end - start < 2 {
        return contract_err("warp segment needs at least two samples");
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return contract_err(format!("warp factor must be positive, got {scale}"));
    }
    if scale == 1.0 {
        return Ok(x.clone());
    }
    let (warped, _) = warp_segment(x.samples(), start, end, scale);
    Ok(x.with_samples(resample_linear(&warped, n)))
}

/// Spliced signal before length correction, plus the warped segment length.
pub fn warp_segment(x: &[f64], start: usize, end: usize, scale: f64) -> (Vec<f64>, usize) {
    let seg_len = (((end - start) as f64) * scale).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(x.len() - (end - start) + seg_len);
    out.extend_from_slice(&x[..start]);
    out.extend((0..seg_len).map(|j| lerp_at(x, start as f64 + j as f64 / scale)));
    out.extend_from_slice(&x[end..]);
    (out, seg_len)
}

pub fn flip(x: &Signal) -> Signal {
    x.with_samples(x.samples().iter().map(|v| -v).collect())
}

/// Add `𝒩(0, σ²)` noise drawn from the stream for `seed`.
pub fn time_noise(x: &Signal, sigma: f64, seed: u64) -> Result<Signal> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return contract_err(format!("noise std must be nonnegative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated std");
    let mut r = rng::stream(seed, &[]);
    Ok(x.with_samples(x.samples().iter().map(|v| v + normal.sample(&mut r)).collect()))
}

fn back_to_time(x: &Signal, bins: &[Complex64]) -> Result<Signal> {
    let (samples, residue) = ifft_real(bins);
    if residue > REAL_RESIDUE_TOL * (1.0 + x.energy().sqrt()) {
        return Err(crate::Error::Numeric(format!("inverse transform left imaginary residue {residue:e}")));
    }
    Ok(x.with_samples(samples))
}

/// Bins covered by a contiguous band and its conjugate mirror.
fn band_with_mirror(n: usize, start: usize, width: usize) -> Vec<usize> {
    let mut bins: Vec<usize> = (start..start + width).collect();
    bins.extend((start..start + width).map(|k| (n - k) % n));
    bins.sort_unstable();
    bins.dedup();
    bins
}

/// Zero the band `[start, start + width)` and its mirror, then invert.
pub fn freq_mask_band(x: &Signal, start: usize, width: usize) -> Result<Signal> {
    let n = x.len();
    if start + width > n {
        return contract_err(format!("mask band {start}+{width} exceeds {n} bins"));
    }
    if width == 0 {
        return Ok(x.clone());
    }
    let mut bins = fft_real(x.samples());
    for k in band_with_mirror(n, start, width) {
        bins[k] = Complex64::new(0.0, 0.0);
    }
    back_to_time(x, &bins)
}

/// Zero a random contiguous band of `⌈fraction·T⌉` bins (plus its mirror).
pub fn freq_mask(x: &Signal, fraction: f64, seed: u64) -> Result<Signal> {
    if !(0.0..=1.0).contains(&fraction) {
        return contract_err(format!("mask fraction must lie in [0, 1], got {fraction}"));
    }
    let n = x.len();
    let width = ((fraction * n as f64).ceil() as usize).min(n);
    let start = rng::stream(seed, &[]).gen_range(0..=n - width);
    freq_mask_band(x, start, width)
}

/// Add conjugate-symmetric complex Gaussian noise with `E|N[k]|² = σ²`.
pub fn freq_noise(x: &Signal, sigma: f64, seed: u64) -> Result<Signal> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return contract_err(format!("noise std must be nonnegative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let n = x.len();
    let mut r = rng::stream(seed, &[]);
    let real_bin = Normal::new(0.0, sigma).expect("validated std");
    let half = Normal::new(0.0, sigma / std::f64::consts::SQRT_2).expect("validated std");
    let mut bins = fft_real(x.samples());
    bins[0] += real_bin.sample(&mut r);
    for k in 1..=(n - 1) / 2 {
        let noise = Complex64::new(half.sample(&mut r), half.sample(&mut r));
        bins[k] += noise;
        bins[n - k] += noise.conj();
    }
    if n % 2 == 0 && n > 1 {
        bins[n / 2] += real_bin.sample(&mut r);
    }
    back_to_time(x, &bins)
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Draw one view of `x`: crop, then a nonempty random subset of the
/// enabled ops applied in canonical order.
pub fn sample_view(x: &Signal, policy: &AugPolicy, source_index: usize, view_index: usize) -> Result<AugmentedView> {
    if policy.ops.is_empty() {
        return contract_err("augmentation policy enables no operations");
    }
    policy.validate()?;
    let mut r = rng::stream(policy.seed, &[rng::TAG_AUGMENT, source_index as u64, view_index as u64]);
    let mut applied = Vec::new();

    let crop_len = policy.crop_len.unwrap_or(x.len()).min(x.len());
    let crop_start = r.gen_range(0..=x.len() - crop_len);
    let mut cur = x.with_samples(x.samples()[crop_start..crop_start + crop_len].to_vec());
    if crop_len != x.len() {
        applied.push(AppliedOp::Crop { start: crop_start, len: crop_len });
    }

    let mut chosen: Vec<AugKind> = AugKind::ALL
        .iter()
        .copied()
        .filter(|k| policy.ops.contains(k) && r.gen_bool(policy.op_probability))
        .collect();
    if chosen.is_empty() {
        chosen.push(*policy.ops.choose(&mut r).expect("nonempty"));
    }

    let n = cur.len();
    for kind in AugKind::ALL.iter().filter(|k| chosen.contains(k)) {
        match kind {
            AugKind::Warp => {
                let [g_lo, g_hi] = policy.warp_segment;
                let seg = ((r.gen_range(g_lo..=g_hi) * n as f64).round() as usize).clamp(2.min(n), n);
                if n < 2 || seg < 2 {
                    continue;
                }
                let start = r.gen_range(0..=n - seg);
                let [s_lo, s_hi] = policy.warp_scale;
                let scale = r.gen_range(s_lo.ln()..=s_hi.ln()).exp();
                cur = window_warp(&cur, start, start + seg, scale)?;
                applied.push(AppliedOp::Warp { start, end: start + seg, scale });
            }
            AugKind::Flip => {
                cur = flip(&cur);
                applied.push(AppliedOp::Flip);
            }
            AugKind::TimeNoise => {
                let sigma = policy.time_noise_rel_sigma * std_dev(cur.samples());
                let seed = r.gen();
                cur = time_noise(&cur, sigma, seed)?;
                applied.push(AppliedOp::TimeNoise { sigma, seed });
            }
            AugKind::FreqMask => {
                let [m_lo, m_hi] = policy.mask_fraction;
                let fraction = r.gen_range(m_lo..=m_hi);
                let seed = r.gen();
                cur = freq_mask(&cur, fraction, seed)?;
                applied.push(AppliedOp::FreqMask { fraction, seed });
            }
            AugKind::FreqNoise => {
                let sigma = policy.freq_noise_rel_sigma * std_dev(cur.samples()) * (n as f64).sqrt();
                let seed = r.gen();
                cur = freq_noise(&cur, sigma, seed)?;
                applied.push(AppliedOp::FreqNoise { sigma, seed });
            }
        }
    }
    Ok(AugmentedView { signal: cur, source_index, applied })
}

/// `count` independent views of the window with pseudo-label `source_index`.
pub fn sample_views(x: &Signal, policy: &AugPolicy, source_index: usize, count: usize) -> Result<Vec<AugmentedView>> {
    if count == 0 {
        return contract_err("view count must be at least 1");
    }
    (0..count).map(|v| sample_view(x, policy, source_index, v)).collect()
}

/// Views with augmentation disabled: the (possibly cropped) window itself.
pub fn identity_views(x: &Signal, policy: &AugPolicy, source_index: usize, count: usize) -> Result<Vec<AugmentedView>> {
    if count == 0 {
        return contract_err("view count must be at least 1");
    }
    let crop_len = policy.crop_len.unwrap_or(x.len()).min(x.len());
    (0..count)
        .map(|v| {
            let mut r = rng::stream(policy.seed, &[rng::TAG_AUGMENT, source_index as u64, v as u64]);
            let start = r.gen_range(0..=x.len() - crop_len);
            Ok(AugmentedView {
                signal: x.with_samples(x.samples()[start..start + crop_len].to_vec()),
                source_index,
                applied: vec![],
            })
        })
        .collect()
}
