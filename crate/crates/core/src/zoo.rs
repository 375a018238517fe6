//! The MLP and CNN generator/discriminator pairs.
//!
//! Generators end in a [`BinaryOutputLayer`]; their bodies produce the
//! logits it binarizes. Discriminators end in a single unit whose head is a
//! sigmoid for the GAN objective and linear for the Wasserstein objectives.
//! Batch norm, where enabled, follows the affine op of every hidden layer
//! and precedes its activation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Layout, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNorm, Conv2d, Dense, InitScheme, Layer, Mode, Padding, Sequential, TransConv2d,
    LEAKY_SLOPE,
};
use crate::neurons::{BinaryOutputLayer, NeuronMode, PreactivationRecord};
use crate::objectives::{Head, ObjectiveKind};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LATENT_DIM: usize = 128;
pub const CNN_FLATTEN_WIDTH: usize = 7 * 7 * 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    Cnn,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Cnn => "cnn",
        }
    }

    /// Shape of images exchanged between generator, discriminator and data.
    pub fn layout(self) -> Layout {
        match self {
            Family::Mlp => Layout::Flat,
            Family::Cnn => Layout::Image,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Family::Mlp),
            "cnn" => Ok(Family::Cnn),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Generator,
    Discriminator,
}

/// Architecture of a generator/discriminator pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub output_mode: NeuronMode,
    pub objective: ObjectiveKind,
    pub bn_in_g: bool,
    pub bn_in_d: bool,
    pub latent_dim: usize,
}

impl ModelSpec {
    /// Batch norm in the generator always; in the discriminator only for GAN.
    pub fn new(family: Family, objective: ObjectiveKind, output_mode: NeuronMode) -> Self {
        ModelSpec {
            family,
            output_mode,
            objective,
            bn_in_g: true,
            bn_in_d: objective == ObjectiveKind::Gan,
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }

    pub fn head(&self) -> Head {
        self.objective.head()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }

    /// Per-sample shape of a generated image.
    pub fn image_dims(&self) -> Vec<usize> {
        match self.family {
            Family::Mlp => vec![PIXELS],
            Family::Cnn => vec![1, SIDE, SIDE],
        }
    }
}

/// Draw `batch` latent vectors from the standard normal prior.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(batch: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    let values: Vec<T> = (0..batch * dim)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(vec![batch, dim], values).expect("latent shape matches sample count")
}

fn hidden<T: Real>(layers: &mut Vec<Layer<T>>, affine: Layer<T>, channels: usize, bn: bool, act: Activation) {
    layers.push(affine);
    if bn {
        layers.push(Layer::BatchNorm(BatchNorm::new(channels)));
    }
    layers.push(Layer::Act(act));
}

fn dense<T: Real, R: Rng + ?Sized>(i: usize, o: usize, scheme: InitScheme, rng: &mut R) -> Layer<T> {
    Layer::Dense(Dense::new(i, o, Activation::Identity, scheme, rng))
}

fn leaky() -> Activation {
    Activation::LeakyRelu(LEAKY_SLOPE)
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: ModelSpec,
    pub body: Sequential<T>,
    pub output: BinaryOutputLayer,
}

/// `z(latent) → 1024 ReLU → 784 → output neurons`.
pub fn build_mlp_generator<T: Real, R: Rng + ?Sized>(
    spec: &ModelSpec,
    rng: &mut R,
    neuron_rng: rng::Rng,
) -> Result<Generator<T>> {
    spec.validate()?;
    let mut layers = Vec::new();
    let relu = Activation::Relu.init_scheme();
    hidden(&mut layers, dense(spec.latent_dim, 1024, relu, rng), 1024, spec.bn_in_g, Activation::Relu);
    layers.push(dense(1024, PIXELS, InitScheme::GlorotUniform, rng));
    Ok(Generator::assemble(*spec, layers, neuron_rng))
}

/// Transposed convolutions on a 1×1 map: 128@2×2/1, 64@4×4/2, 32@3×3/2,
/// 1@4×4/2, all valid, giving spatial sizes 1, 2, 6, 13, 28.
pub fn build_cnn_generator<T: Real, R: Rng + ?Sized>(
    spec: &ModelSpec,
    rng: &mut R,
    neuron_rng: rng::Rng,
) -> Result<Generator<T>> {
    spec.validate()?;
    let relu = Activation::Relu;
    let mut layers = vec![Layer::Reshape(vec![spec.latent_dim, 1, 1])];
    let mut inputs = spec.latent_dim;
    for (outputs, k, s) in [(128, 2, 1), (64, 4, 2), (32, 3, 2)] {
        let tc = TransConv2d::new(inputs, outputs, k, s, Activation::Identity, relu.init_scheme(), rng)?;
        hidden(&mut layers, Layer::TransConv(tc), outputs, spec.bn_in_g, relu);
        inputs = outputs;
    }
    let out = TransConv2d::new(inputs, 1, 4, 2, Activation::Identity, InitScheme::GlorotUniform, rng)?;
    layers.push(Layer::TransConv(out));
    Ok(Generator::assemble(*spec, layers, neuron_rng))
}

pub fn build_generator<T: Real, R: Rng + ?Sized>(
    spec: &ModelSpec,
    rng: &mut R,
    neuron_rng: rng::Rng,
) -> Result<Generator<T>> {
    match spec.family {
        Family::Mlp => build_mlp_generator(spec, rng, neuron_rng),
        Family::Cnn => build_cnn_generator(spec, rng, neuron_rng),
    }
}

impl<T: Real> Generator<T> {
    fn assemble(spec: ModelSpec, layers: Vec<Layer<T>>, neuron_rng: rng::Rng) -> Self {
        Generator {
            spec,
            body: Sequential::new(layers),
            output: BinaryOutputLayer::new(spec.output_mode, neuron_rng),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn side(&self) -> Side {
        Side::Generator
    }

    pub fn param_count(&self) -> usize {
        self.body.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.body.bind(tape, trainable)
    }

    fn check_latent(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.spec.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "generator latent",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), self.spec.latent_dim],
            });
        }
        Ok(())
    }

    /// Pre-sigmoid outputs of the last layer.
    pub fn logits(&mut self, tape: &mut Tape<T>, params: &[Var], z: Var, mode: Mode) -> Result<Var> {
        self.check_latent(tape, z)?;
        self.body.forward(tape, params, z, mode)
    }

    /// Generated images and the preactivations they were binarized from.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        z: Var,
        mode: Mode,
    ) -> Result<(Var, PreactivationRecord<T>)> {
        let logits = self.logits(tape, params, z, mode)?;
        self.output.forward(tape, logits)
    }

    /// Eval-mode forward pass off the gradient path, drawing stochastic
    /// thresholds from the layer's own stream.
    pub fn generate(&mut self, z: &Tensor<T>) -> Result<(Tensor<T>, PreactivationRecord<T>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (x, rec) = self.forward(&mut tape, &params, zv, Mode::Eval)?;
        Ok((tape.value(x).clone(), rec))
    }

    /// [`generate`](Self::generate) with thresholds drawn from `rng`.
    pub fn generate_with_rng<R: Rng + ?Sized>(
        &mut self,
        z: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, PreactivationRecord<T>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let logits = self.logits(&mut tape, &params, zv, Mode::Eval)?;
        let (x, rec) = self.output.forward_with_rng(&mut tape, logits, rng)?;
        Ok((tape.value(x).clone(), rec))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: ModelSpec,
    pub body: Sequential<T>,
}

/// `784 → 512 → 256 → 1` with LeakyReLU between.
pub fn build_mlp_discriminator<T: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Discriminator<T>> {
    let mut layers = Vec::new();
    let scheme = leaky().init_scheme();
    hidden(&mut layers, dense(PIXELS, 512, scheme, rng), 512, spec.bn_in_d, leaky());
    hidden(&mut layers, dense(512, 256, scheme, rng), 256, spec.bn_in_d, leaky());
    layers.push(dense(256, 1, InitScheme::GlorotUniform, rng));
    Ok(Discriminator {
        spec: *spec,
        body: Sequential::new(layers),
    })
}

/// Two same-padded 3×3 conv + 2×2 pool stages (32, 64 filters), then
/// `3136 → 128 → 1`.
pub fn build_cnn_discriminator<T: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Discriminator<T>> {
    let mut layers = Vec::new();
    let scheme = leaky().init_scheme();
    let mut inputs = 1;
    for outputs in [32, 64] {
        let conv = Conv2d::new(inputs, outputs, 3, 1, Padding::Same, Activation::Identity, scheme, rng)?;
        hidden(&mut layers, Layer::Conv(conv), outputs, spec.bn_in_d, leaky());
        layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
        inputs = outputs;
    }
    layers.push(Layer::Flatten);
    hidden(&mut layers, dense(CNN_FLATTEN_WIDTH, 128, scheme, rng), 128, spec.bn_in_d, leaky());
    layers.push(dense(128, 1, InitScheme::GlorotUniform, rng));
    Ok(Discriminator {
        spec: *spec,
        body: Sequential::new(layers),
    })
}

pub fn build_discriminator<T: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Discriminator<T>> {
    match spec.family {
        Family::Mlp => build_mlp_discriminator(spec, rng),
        Family::Cnn => build_cnn_discriminator(spec, rng),
    }
}

impl<T: Real> Discriminator<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn side(&self) -> Side {
        Side::Discriminator
    }

    pub fn head(&self) -> Head {
        self.spec.head()
    }

    pub fn param_count(&self) -> usize {
        self.body.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.body.bind(tape, trainable)
    }

    /// Raw score before the head, `[batch, 1]`.
    pub fn logits(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.body.forward(tape, params, x, mode)
    }

    /// Head output: a probability for GAN, the critic score otherwise.
    pub fn forward(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let s = self.logits(tape, params, x, mode)?;
        Ok(match self.head() {
            Head::Sigmoid => tape.sigmoid(s),
            Head::Linear => s,
        })
    }
}
