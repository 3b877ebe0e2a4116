use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::ParamTensor;

/// Seeded parameter initializer. Draw order is the construction order, so
/// the same config and seed always give the same weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamTensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        ParamTensor::new(shape, data).expect("numel matches by construction")
    }
}
