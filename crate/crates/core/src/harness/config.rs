use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neurons::NeuronMode;
use crate::objectives::{AdversarialObjective, ObjectiveKind, DEFAULT_CLIP_BOUND, DEFAULT_GP_LAMBDA};
use crate::optim::{OptimizerKind, DEFAULT_LR};
use crate::zoo::{Family, ModelSpec, DEFAULT_LATENT_DIM};

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_SAMPLE_COUNT: usize = 64;

/// Everything that determines a training run. Loaded from TOML; every field
/// has a default, so an empty file is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub gp_lambda: f64,
    pub clip_bound: f64,
    /// Defaults to 5 for the Wasserstein objectives and 1 for GAN.
    pub n_critic: Option<usize>,
    pub neuron_mode: NeuronMode,
    pub family: Family,
    pub bn_in_g: Option<bool>,
    /// Defaults to on for GAN, off otherwise.
    pub bn_in_d: Option<bool>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub anneal: bool,
    /// Defaults to RMSProp for WGAN and Adam otherwise.
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: f64,
    pub output_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Train on the first `subset` images only.
    pub subset: Option<usize>,
    /// Stop after this many generator iterations, even mid-epoch.
    pub max_iterations: Option<usize>,
    /// Write a checkpoint every this many epochs (the last one is always kept).
    pub checkpoint_every: usize,
    /// Images per sample grid and per preactivation histogram.
    pub sample_count: usize,
    pub run_id: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            objective: ObjectiveKind::WganGp,
            gp_lambda: DEFAULT_GP_LAMBDA,
            clip_bound: DEFAULT_CLIP_BOUND,
            n_critic: None,
            neuron_mode: NeuronMode::Deterministic,
            family: Family::Mlp,
            bn_in_g: None,
            bn_in_d: None,
            latent_dim: DEFAULT_LATENT_DIM,
            epochs: DEFAULT_EPOCHS,
            batch_size: crate::data::DEFAULT_BATCH,
            anneal: true,
            optimizer: None,
            learning_rate: DEFAULT_LR,
            output_dir: PathBuf::from("runs"),
            data_dir: None,
            subset: None,
            max_iterations: None,
            checkpoint_every: 1,
            sample_count: DEFAULT_SAMPLE_COUNT,
            run_id: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adversarial(&self) -> AdversarialObjective {
        AdversarialObjective {
            kind: self.objective,
            clip_bound: self.clip_bound,
            gp_lambda: self.gp_lambda,
            n_critic: self.n_critic.unwrap_or_else(|| self.objective.default_n_critic()),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family, self.objective, self.neuron_mode);
        spec.latent_dim = self.latent_dim;
        if let Some(on) = self.bn_in_g {
            spec.bn_in_g = on;
        }
        if let Some(on) = self.bn_in_d {
            spec.bn_in_d = on;
        }
        spec
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.objective {
            ObjectiveKind::Wgan => OptimizerKind::Rmsprop,
            ObjectiveKind::Gan | ObjectiveKind::WganGp => OptimizerKind::Adam,
        })
    }

    /// The explicit id, or one derived from the settings that vary across
    /// the experiment matrix.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let spec = self.model_spec();
        format!(
            "{}-{}-{}-{}-s{}",
            self.family.tag(),
            self.objective.tag(),
            self.neuron_mode.tag(),
            if spec.bn_in_d { "bnd" } else { "nobnd" },
            self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn validate(&self) -> Result<()> {
        self.adversarial().validate()?;
        self.model_spec().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) {
                return Err(Error::Config(format!("run_id `{id}` must be a non-empty file name")));
            }
        }
        Ok(())
    }
}
