//! Shared fixtures for the criterion benchmarks.

use binarygan_core::data::{binarize, synthetic_digits, BinarizedDataset};
use binarygan_core::rng::{stream, Stream};
use binarygan_core::{ExperimentConfig, Family, NeuronMode, ObjectiveKind, Tensor};
use rand::Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Stream::Init);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

pub fn dataset(count: usize) -> BinarizedDataset {
    binarize(&synthetic_digits(count, &mut stream(0, Stream::Init)))
}

pub fn config(family: Family, objective: ObjectiveKind, mode: NeuronMode) -> ExperimentConfig {
    ExperimentConfig {
        family,
        objective,
        neuron_mode: mode,
        ..Default::default()
    }
}
