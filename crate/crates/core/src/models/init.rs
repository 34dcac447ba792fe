use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::tensor::Tensor;

/// Kaiming-uniform initialization for ReLU networks: `U(−b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
