//! Adversarial training of generators whose output layer is made of binary
//! neurons, trained end to end with sigmoid-adjusted straight-through
//! gradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays and a reverse-mode tape with double backward
//! - [`layers`]: dense, convolution, pooling and batch-norm blocks
//! - [`neurons`]: deterministic and stochastic binary output neurons
//! - [`objectives`]: GAN, WGAN and WGAN-GP losses and the gradient penalty
//! - [`optim`]: Adam, RMSProp and weight clipping
//! - [`data`]: IDX parsing, binarization and batching
//! - [`zoo`]: the MLP and CNN generator/discriminator pairs
//! - [`harness`]: training loop, checkpoints and artifacts

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod neurons;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunArtifacts};
pub use neurons::{BinaryOutputLayer, NeuronMode, PreactivationRecord};
pub use objectives::{AdversarialObjective, ObjectiveKind};
pub use tensor::{Gradients, Keep, Real, Tape, Tensor, Var};
pub use zoo::{Discriminator, Family, Generator, ModelSpec};
