use crate::rng::SplitMix64;
use crate::{Scalar, Tensor};

/// Deterministic weight initializer.
#[derive(Clone, Debug)]
pub struct Init {
    rng: SplitMix64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: SplitMix64::new(seed) }
    }

    /// Kaiming uniform for a ReLU-family fan-in: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn he_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.uniform(-bound, bound)))
    }
}
