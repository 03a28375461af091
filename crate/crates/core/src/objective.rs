//! Training losses and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-24;
const BATCH_NORM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Time-branch classification weight.
    pub cls_time: f64,
    /// Frequency-branch classification weight.
    pub cls_freq: f64,
    /// Meta (query-set) loss weight.
    pub meta: f64,
    /// Stop gradients through the time-branch target of the alignment loss.
    pub stop_target: bool,
    /// Weight of the optional cross-correlation term; 0 disables it.
    pub cross_corr: f64,
    /// Off-diagonal weight inside the cross-correlation term.
    pub cross_corr_off_diag: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls_time: 1.0,
            cls_freq: 1.0,
            meta: 1.0,
            stop_target: false,
            cross_corr: 0.0,
            cross_corr_off_diag: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cls_time", self.cls_time),
            ("cls_freq", self.cls_freq),
            ("meta", self.meta),
            ("cross_corr", self.cross_corr),
            ("cross_corr_off_diag", self.cross_corr_off_diag),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return contract_err(format!("loss weight {name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Mean over rows of `‖ẑ_f − ẑ_t‖²`, where `ẑ` are L2-normalized rows. The
/// frequency embedding predicts the time embedding; with `stop_target` the
/// time side is treated as a constant.
pub fn align_loss(z_t: &Tensor, z_f: &Tensor, stop_target: bool) -> Result<Tensor> {
    if z_t.shape() != z_f.shape() {
        return dim_err(format!("alignment inputs differ: {:?} vs {:?}", z_t.shape(), z_f.shape()));
    }
    let (rows, _) = z_t.dims2()?;
    let target = if stop_target { z_t.detach() } else { z_t.clone() };
    let diff = z_f.l2_normalize_rows(NORM_EPS)?.sub(&target.l2_normalize_rows(NORM_EPS)?)?;
    Ok(diff.square().sum().scale(1.0 / rows as f64))
}

/// Mean cross-entropy.
pub fn cls_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    logits.cross_entropy(labels)
}

/// Standardize each column over the batch.
fn batch_standardize(z: &Tensor) -> Result<Tensor> {
    let centered = z.sub_bcast(&z.mean_cols()?)?;
    let std = centered.square().mean_cols()?.add_scalar(BATCH_NORM_EPS).sqrt();
    centered.mul_bcast(&std.powf(-1.0))
}

/// Redundancy-reduction loss on the cross-correlation of standardized
/// embeddings: `Σᵢ(1 − Cᵢᵢ)² + λ_off·Σ_{i≠j} Cᵢⱼ²`, `C = ZₐᵀZ_b / B`.
pub fn cross_corr_loss(z_a: &Tensor, z_b: &Tensor, off_diag: f64) -> Result<Tensor> {
    if z_a.shape() != z_b.shape() {
        return dim_err(format!("cross-correlation inputs differ: {:?} vs {:?}", z_a.shape(), z_b.shape()));
    }
    let (batch, d) = z_a.dims2()?;
    if batch < 2 {
        return contract_err("cross-correlation loss needs a batch of at least 2");
    }
    let c = batch_standardize(z_a)?.matmul_tn(&batch_standardize(z_b)?)?.scale(1.0 / batch as f64);
    let mut eye = vec![0.0; d * d];
    let mut off = vec![1.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
        off[i * d + i] = 0.0;
    }
    let eye = Tensor::new(eye, &[d, d])?;
    let off = Tensor::new(off, &[d, d])?;
    let on_diag = eye.sub(&c)?.mul(&eye)?.square().sum();
    let off_diag_term = c.mul(&off)?.square().sum().scale(off_diag);
    on_diag.add(&off_diag_term)
}

/// Individual loss terms computed on one batch or task set.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub align: Tensor,
    pub cls_time: Tensor,
    pub cls_freq: Tensor,
    pub meta: Tensor,
}

impl LossParts {
    pub fn zeros() -> Self {
        Self {
            align: Tensor::scalar(0.0),
            cls_time: Tensor::scalar(0.0),
            cls_freq: Tensor::scalar(0.0),
            meta: Tensor::scalar(0.0),
        }
    }
}

/// `ℒ_align + λ₁ℒ_cls^t + λ₂ℒ_cls^f + λ₃ℒ_meta`.
pub fn final_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    parts
        .align
        .add(&parts.cls_time.scale(w.cls_time))?
        .add(&parts.cls_freq.scale(w.cls_freq))?
        .add(&parts.meta.scale(w.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_alignment_is_zero() {
        let z = m(&[&[1.0, 2.0], &[-0.5, 3.0]]);
        assert!(align_loss(&z, &z, false).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn orthogonal_rows_cost_two() {
        let zt = m(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let zf = m(&[&[0.0, 2.0], &[-5.0, 0.0]]);
        assert!((align_loss(&zt, &zf, false).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_ignores_positive_scaling() {
        let zt = m(&[&[1.0, -2.0, 0.5], &[0.3, 0.1, 4.0]]);
        let zf = m(&[&[0.2, 1.0, -1.0], &[2.0, 2.0, 1.0]]);
        let base = align_loss(&zt, &zf, false).unwrap().item();
        for c in [0.01, 3.0, 250.0] {
            let scaled = align_loss(&zt, &zf.scale(c), false).unwrap().item();
            assert!((scaled - base).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_target_blocks_time_gradient() {
        let zt = Tensor::param(vec![1.0, 0.5, -0.2, 0.7], &[2, 2]).unwrap();
        let zf = Tensor::param(vec![0.1, 0.9, 0.4, -0.3], &[2, 2]).unwrap();
        let g = grad(&align_loss(&zt, &zf, true).unwrap(), &[zt.clone(), zf.clone()], false).unwrap();
        assert!(g[0].data().iter().all(|v| *v == 0.0));
        assert!(g[1].data().iter().any(|v| *v != 0.0));
        assert!(align_loss(&zt, &Tensor::zeros(&[2, 3]), false).is_err());
    }

    #[test]
    fn classification_limits() {
        let uniform = Tensor::zeros(&[2, 3]);
        assert!((cls_loss(&uniform, &[0, 2]).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let confident = m(&[&[1000.0, 0.0, 0.0]]);
        assert!(cls_loss(&confident, &[0]).unwrap().item() < 1e-12);
        assert!(cls_loss(&uniform, &[0, 3]).is_err());
    }

    #[test]
    fn cross_corr_fixed_points() {
        // columns of a 4x2 Hadamard-like block: zero mean, unit variance, uncorrelated
        let z = m(&[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]]);
        assert!(cross_corr_loss(&z, &z, 5e-3).unwrap().item() < 1e-12);
        let anti = cross_corr_loss(&z, &z.neg(), 5e-3).unwrap().item();
        assert!((anti - 8.0).abs() < 1e-6, "two diagonal terms of 4 each, got {anti}");
        let dup = m(&[&[1.0, 1.0], &[-1.0, -1.0], &[2.0, 2.0], &[0.5, 0.5]]);
        let red = cross_corr_loss(&dup, &dup, 5e-3).unwrap().item();
        assert!(red > 1e-3, "duplicated columns should be penalized, got {red}");
        assert!(cross_corr_loss(&m(&[&[1.0, 2.0]]), &m(&[&[1.0, 2.0]]), 5e-3).is_err());
    }

    #[test]
    fn final_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(final_loss(&LossParts::zeros(), &w).unwrap().item(), 0.0);
        let parts = LossParts {
            align: Tensor::scalar(0.5),
            cls_time: Tensor::scalar(0.2),
            cls_freq: Tensor::scalar(0.2),
            meta: Tensor::scalar(0.1),
        };
        assert!((final_loss(&parts, &w).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn meta_weight_scales_its_gradient_linearly() {
        let theta = Tensor::param(vec![0.4, -1.1], &[2]).unwrap();
        let parts = |t: &Tensor| LossParts {
            align: t.square().sum(),
            cls_time: t.exp().sum(),
            cls_freq: t.scale(3.0).sum(),
            meta: t.powf(3.0).sum(),
        };
        let g_for = |meta: f64| {
            let w = LossWeights { meta, ..LossWeights::default() };
            grad(&final_loss(&parts(&theta), &w).unwrap(), &[theta.clone()], false).unwrap().remove(0)
        };
        let (g0, g1, g2) = (g_for(0.0), g_for(1.0), g_for(2.0));
        for i in 0..2 {
            let one = g1.data()[i] - g0.data()[i];
            let two = g2.data()[i] - g0.data()[i];
            assert!((two - 2.0 * one).abs() < 1e-9);
        }
    }
}
