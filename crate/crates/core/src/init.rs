//! Seeded parameter initialisation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic source of initial weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: (usize, usize), std: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    /// Scaled so each output unit sees unit-variance input when inputs are
    /// unit variance.
    pub fn fan_in(&mut self, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
        self.normal(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn uniform(&mut self, shape: (usize, usize), low: f64, high: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || self.rng.random_range(low..high))
    }
}
