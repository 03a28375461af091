//! Central-difference gradient oracle.
//!
//! The numeric side only ever evaluates forward values with recording
//! disabled, so it stays independent of the backward rules it checks.

use super::{grad, no_grad, Tensor};
use crate::error::{contract_err, Result};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of the scalar `f` with respect to `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let _off = no_grad();
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let target = &inputs[which];
    let mut out = Vec::with_capacity(target.numel());
    for i in 0..target.numel() {
        let eval = |delta: f64| -> Result<f64> {
            let mut vals = target.to_vec();
            vals[i] += delta;
            let mut args = base.clone();
            args[which] = Tensor::new(vals, target.shape())?;
            let y = f(&args)?;
            if y.numel() != 1 {
                return contract_err("gradient check needs a scalar function");
            }
            Ok(y.item())
        };
        out.push((eval(step)? - eval(-step)?) / (2.0 * step));
    }
    Ok(out)
}

/// Relative error between the analytic and numeric gradient for each input.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::detach_leaf).collect();
    let y = f(&leaves)?;
    let analytic = grad(&y, &leaves, false)?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_gradient(&f, inputs, i, step)?;
        errs.push(relative_error(a.data(), &n));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_cubic() {
        let x = Tensor::new(vec![2.0], &[1]).unwrap();
        let g = numeric_gradient(&|a: &[Tensor]| Ok(a[0].powf(3.0).sum()), &[x], 0, 1e-3).unwrap();
        // (x+h)³ − (x−h)³ over 2h = 3x² + h²
        assert!((g[0] - (12.0 + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn relative_error_handles_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
