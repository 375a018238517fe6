use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Uniform initialization schemes scaled by fan-in/fan-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`, for ReLU-family layers.
    HeUniform,
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`, for sigmoid and
    /// linear output layers.
    GlorotUniform,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::HeUniform => (6.0 / fan_in as f64).sqrt(),
            InitScheme::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    /// A tensor of `shape` drawn from this scheme's uniform distribution.
    pub fn sample<T: Real, R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let b = self.bound(fan_in, fan_out);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-b..b))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
    }
}
