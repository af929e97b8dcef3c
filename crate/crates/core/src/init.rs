//! Weight initialization shared by every module with trainable tensors.

use rand::Rng;

use crate::tape::Param;
use crate::tensor::Tensor;

/// Uniform(-b, b) with b = sqrt(1/fan_in).
pub fn uniform_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

pub fn uniform_param(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Param {
    Param::new(uniform_tensor(shape, fan_in, rng))
}

pub fn zero_param(shape: &[usize]) -> Param {
    Param::new(Tensor::zeros(shape))
}
