use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-limit..=limit))
}

/// Uniform in `±scale / sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, scale: f64) -> Tensor {
    let limit = (scale / (fan_in as f64).sqrt()) as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-limit..=limit))
}
