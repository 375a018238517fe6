use std::path::Path;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::neurons::PreactivationRecord;
use crate::tensor::Tensor;
use crate::zoo::{sample_latent, Generator};

/// Generated images with the preactivations they were binarized from.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub images: Tensor<f32>,
    pub preactivations: PreactivationRecord<f32>,
}

pub fn load_generator(checkpoint: &Path) -> Result<Generator<f32>> {
    Checkpoint::load(checkpoint)?.restore_generator()
}

/// Draw `count` latent vectors from `rng` and generate from them in eval
/// mode; stochastic neurons take their thresholds from the same stream.
pub fn generate_samples<R: Rng + ?Sized>(
    generator: &mut Generator<f32>,
    count: usize,
    rng: &mut R,
) -> Result<Samples> {
    let z = sample_latent(count, generator.spec().latent_dim, rng);
    generate_from_latent(generator, &z, rng)
}

pub fn generate_from_latent<R: Rng + ?Sized>(
    generator: &mut Generator<f32>,
    z: &Tensor<f32>,
    rng: &mut R,
) -> Result<Samples> {
    let (images, preactivations) = generator.generate_with_rng(z, rng)?;
    Ok(Samples { images, preactivations })
}
