use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian entries with the given standard deviation.
pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
    Tensor::from_fn(shape, |_| if std == 0.0 { 0.0 } else { normal.sample(rng) })
}

/// Glorot-style scaled Gaussian for a `[fan_out × fan_in]` weight.
pub fn glorot(fan_out: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    randn(&[fan_out, fan_in], std, rng)
}
