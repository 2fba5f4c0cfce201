use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// Platform-stable generator used everywhere a seed is accepted.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor<T: Real>(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let dist = Normal::new(mean, std.max(0.0)).expect("non-negative std");
    let data = (0..numel).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}
