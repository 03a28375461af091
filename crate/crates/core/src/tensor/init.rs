use rand::Rng;

use super::Tensor;
use crate::error::Result;

/// Tracked leaf drawn uniformly from `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::param(data, shape)
}

pub fn constant(shape: &[usize], value: f64) -> Result<Tensor> {
    Tensor::param(vec![value; shape.iter().product()], shape)
}
