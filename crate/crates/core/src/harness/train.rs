use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::{self, BatchIterator, BinarizedDataset, Layout};
use crate::error::{Error, Result};
use crate::harness::artifacts::{compute_preactivation_histogram, emit_sample_grid, LossLog, LossRecord};
use crate::harness::config::ExperimentConfig;
use crate::layers::{Mode, Sequential};
use crate::objectives::{
    gan_losses_from_logits, gradient_penalty, sample_interpolates, wasserstein_estimate, wgan_gp_losses,
    wgan_losses, AdversarialObjective, ObjectiveKind,
};
use crate::optim::{clip_weights, Optimizer};
use crate::rng::{self, Stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::zoo::{build_discriminator, build_generator, sample_latent, Discriminator, Generator};

/// Files written by one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunArtifacts {
    pub run_id: String,
    pub dir: PathBuf,
    pub config: PathBuf,
    pub loss_table: PathBuf,
    /// Checkpoint stems; each has a `.manifest` and a `.bin` file.
    pub checkpoints: Vec<PathBuf>,
    pub sample_grids: Vec<PathBuf>,
    pub preactivation_grids: Vec<PathBuf>,
    pub histograms: Vec<PathBuf>,
    pub losses: Vec<LossRecord>,
    pub epochs: usize,
    pub iterations: usize,
    pub final_slope: f64,
}

/// Generator and discriminator with their optimizers and random streams,
/// advanced one generator iteration at a time.
pub struct Trainer<'a> {
    config: ExperimentConfig,
    objective: AdversarialObjective,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    g_opt: Optimizer<f32>,
    d_opt: Optimizer<f32>,
    batches: BatchIterator<'a>,
    latent_rng: rng::Rng,
    interp_rng: rng::Rng,
    layout: Layout,
    iteration: usize,
    epoch: usize,
}

/// Outcome of one discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub d_loss: f64,
    pub w_estimate: Option<f64>,
}

fn values(tape: &Tape<f32>, vars: &[Var]) -> Vec<Tensor<f32>> {
    vars.iter().map(|&v| tape.value(v).clone()).collect()
}

fn summarize(out: &mut String, prefix: &str, net: &Sequential<f32>) {
    for (name, t) in net.params().into_iter().chain(net.buffers()) {
        let _ = writeln!(
            out,
            "{prefix}.{name} shape={:?} max_abs={} finite={}",
            t.shape(),
            t.max_abs(),
            t.is_finite()
        );
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: &ExperimentConfig, data: &'a BinarizedDataset) -> Result<Self> {
        config.validate()?;
        data.require_mnist_dims()?;
        let spec = config.model_spec();
        let objective = config.adversarial();
        objective.check_head(spec.head())?;
        let seed = config.seed;
        let mut init = rng::stream(seed, Stream::Init);
        let mut generator = build_generator(&spec, &mut init, rng::stream(seed, Stream::Neurons))?;
        generator.output.set_annealing(config.anneal);
        let discriminator = build_discriminator(&spec, &mut init)?;
        let kind = config.optimizer_kind();
        Ok(Trainer {
            config: config.clone(),
            objective,
            generator,
            discriminator,
            g_opt: Optimizer::with_lr(kind, config.learning_rate),
            d_opt: Optimizer::with_lr(kind, config.learning_rate),
            batches: BatchIterator::new(data, config.batch_size, rng::stream(seed, Stream::Shuffle))?,
            latent_rng: rng::stream(seed, Stream::Latent),
            interp_rng: rng::stream(seed, Stream::Interpolation),
            layout: spec.family.layout(),
            iteration: 0,
            epoch: 0,
        })
    }

    /// Completed generator iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Generator iterations per epoch: one per full batch of the dataset.
    pub fn iterations_per_epoch(&self) -> usize {
        self.batches.batches_per_epoch()
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn diverged(&self, phase: &'static str, what: &str) -> Error {
        let mut detail = format!("{what}\n");
        summarize(&mut detail, "generator", &self.generator.body);
        summarize(&mut detail, "discriminator", &self.discriminator.body);
        Error::Diverged {
            iteration: self.iteration + 1,
            phase,
            detail,
        }
    }

    fn guard<T>(&self, phase: &'static str, r: Result<T>) -> Result<T> {
        match r {
            Err(e @ (Error::NonFiniteGradient { .. } | Error::NonFiniteUpdate(_) | Error::Domain { .. })) => {
                Err(self.diverged(phase, &e.to_string()))
            }
            other => other,
        }
    }

    fn fake_batch(&mut self) -> Result<Tensor<f32>> {
        let spec = *self.generator.spec();
        let z = sample_latent(self.config.batch_size, spec.latent_dim, &mut self.latent_rng);
        let mut tape = Tape::new();
        let params = self.generator.bind(&mut tape, false);
        let zv = tape.constant(z);
        let (x, _) = self.generator.forward(&mut tape, &params, zv, Mode::Train)?;
        Ok(tape.value(x).clone())
    }

    /// One discriminator update on the next real batch and a fresh fake
    /// batch, followed by weight clipping for WGAN.
    pub fn critic_step(&mut self) -> Result<CriticStats> {
        let r = self.critic_update();
        self.guard("critic", r)
    }

    fn critic_update(&mut self) -> Result<CriticStats> {
        let real = self.batches.next_batch(self.layout);
        let fake = self.fake_batch()?;
        let interpolates = match self.objective.kind {
            ObjectiveKind::WganGp => Some(sample_interpolates(&real, &fake, &mut self.interp_rng)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let d = &mut self.discriminator;
        let params = d.bind(&mut tape, true);
        let rv = tape.constant(real);
        let fv = tape.constant(fake);
        let s_real = d.logits(&mut tape, &params, rv, Mode::Train)?;
        let s_fake = d.logits(&mut tape, &params, fv, Mode::Train)?;
        let (loss, w) = match self.objective.kind {
            ObjectiveKind::Gan => (gan_losses_from_logits(&mut tape, s_real, s_fake)?.1, None),
            ObjectiveKind::Wgan => {
                let w = wasserstein_estimate(&tape, s_real, s_fake);
                (wgan_losses(&mut tape, s_real, s_fake)?.1, Some(w))
            }
            ObjectiveKind::WganGp => {
                let w = wasserstein_estimate(&tape, s_real, s_fake);
                let xhat = tape.leaf(interpolates.expect("drawn for WGAN-GP"), true);
                let critic = |t: &mut Tape<f32>, x: Var| d.logits(t, &params, x, Mode::Train);
                let penalty = gradient_penalty(&mut tape, critic, xhat, self.objective.gp_lambda);
                let penalty = self.guard("critic", penalty)?;
                (wgan_gp_losses(&mut tape, s_real, s_fake, penalty)?.1, Some(w))
            }
        };
        let d_loss = tape.value(loss).item() as f64;
        if !d_loss.is_finite() {
            return Err(self.diverged("critic", &format!("d_loss = {d_loss}")));
        }
        let grads = tape.grad(loss, &params, false);
        let grads = self.guard("critic", grads)?;
        let grads = values(&tape, &grads);
        let step = self.d_opt.step(&mut self.discriminator.body.params_mut(), &grads);
        self.guard("critic", step)?;
        if self.objective.kind == ObjectiveKind::Wgan {
            clip_weights(&mut self.discriminator.body.params_mut(), self.objective.clip_bound);
        }
        Ok(CriticStats { d_loss, w_estimate: w })
    }

    /// One generator update through the binary output layer; returns the
    /// generator loss. [`step`](Self::step) calls this after the critic
    /// updates and advances the iteration counter.
    pub fn generator_step(&mut self) -> Result<f64> {
        let r = self.generator_update();
        self.guard("generator", r)
    }

    fn generator_update(&mut self) -> Result<f64> {
        let spec = *self.generator.spec();
        let z = sample_latent(self.config.batch_size, spec.latent_dim, &mut self.latent_rng);
        let mut tape = Tape::new();
        let gp = self.generator.bind(&mut tape, true);
        let zv = tape.constant(z);
        let (x, _) = self.generator.forward(&mut tape, &gp, zv, Mode::Train)?;
        let dp = self.discriminator.bind(&mut tape, false);
        let s = self.discriminator.logits(&mut tape, &dp, x, Mode::Train)?;
        let loss = match self.objective.kind {
            ObjectiveKind::Gan => gan_losses_from_logits(&mut tape, s, s)?.0,
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => wgan_losses(&mut tape, s, s)?.0,
        };
        let g_loss = tape.value(loss).item() as f64;
        if !g_loss.is_finite() {
            return Err(self.diverged("generator", &format!("g_loss = {g_loss}")));
        }
        let grads = tape.grad(loss, &gp, false);
        let grads = self.guard("generator", grads)?;
        let grads = values(&tape, &grads);
        let step = self.g_opt.step(&mut self.generator.body.params_mut(), &grads);
        self.guard("generator", step)?;
        Ok(g_loss)
    }

    /// `n_critic` discriminator updates followed by one generator update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let mut last = None;
        for _ in 0..self.objective.n_critic {
            last = Some(self.critic_step()?);
        }
        let critic = last.expect("n_critic is at least 1");
        let g_loss = self.generator_step()?;
        self.iteration += 1;
        let record = LossRecord {
            iteration: self.iteration,
            d_loss: critic.d_loss,
            g_loss,
            w_estimate: critic.w_estimate,
        };
        debug!(
            "iteration {} d_loss {:.5} g_loss {:.5}",
            record.iteration, record.d_loss, record.g_loss
        );
        Ok(record)
    }

    /// Close an epoch: bump the counter and anneal the neuron slope.
    pub fn end_epoch(&mut self) {
        self.epoch += 1;
        self.generator.output.anneal_slope();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            format: FORMAT_VERSION,
            run_id: self.config.run_id(),
            seed: self.config.seed,
            epoch: self.epoch,
            iteration: self.iteration,
            slope: self.generator.output.slope(),
            annealing: self.generator.output.annealing(),
            spec: *self.generator.spec(),
        };
        Checkpoint::capture(meta, &self.generator, &self.discriminator)
    }
}

/// Load the training images named by the config (or the environment) and
/// train on them.
pub fn train(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let dir = data::resolve_data_dir(config.data_dir.as_deref()).ok_or_else(|| {
        Error::Config(format!(
            "no data directory: set data_dir in the config or {}",
            data::DATA_DIR_ENV
        ))
    })?;
    let mut dataset = data::load_training_set(&dir)?;
    if let Some(n) = config.subset {
        dataset = dataset.truncate(n);
    }
    info!("loaded {} training images from {}", dataset.len(), dir.display());
    train_with_dataset(config, &dataset)
}

fn write_dump(dir: &Path, run_id: &str, err: &Error) {
    if let Error::Diverged { iteration, phase, detail } = err {
        let path = dir.join(format!("{run_id}-diverged-it{iteration:06}.txt"));
        let text = format!("iteration {iteration}\nphase {phase}\n{detail}");
        if std::fs::write(&path, text).is_ok() {
            log::error!("divergence dump written to {}", path.display());
        }
    }
}

pub fn train_with_dataset(config: &ExperimentConfig, dataset: &BinarizedDataset) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(config, dataset)?;
    let run_id = config.run_id();
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_path = dir.join(format!("{run_id}-config.toml"));
    std::fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let loss_table = dir.join(format!("{run_id}-loss.csv"));
    let mut log = LossLog::create(&loss_table)?;

    let spec = config.model_spec();
    let eval_z = sample_latent::<f32, _>(config.sample_count, spec.latent_dim, &mut rng::stream(config.seed, Stream::Eval));
    let mut artifacts = RunArtifacts {
        run_id: run_id.clone(),
        dir: dir.clone(),
        config: config_path,
        loss_table,
        ..Default::default()
    };
    let limit = config.max_iterations.unwrap_or(usize::MAX);
    let per_epoch = trainer.iterations_per_epoch();
    info!(
        "run {run_id}: {} epochs of {per_epoch} iterations, n_critic {}",
        config.epochs,
        config.adversarial().n_critic
    );

    let mut done = false;
    while !done {
        let mut finished_epoch = true;
        for _ in 0..per_epoch {
            if trainer.iteration() >= limit {
                finished_epoch = false;
                break;
            }
            match trainer.step() {
                Ok(rec) => {
                    log.append(&rec)?;
                    artifacts.losses.push(rec);
                }
                Err(e) => {
                    log.flush()?;
                    write_dump(&dir, &run_id, &e);
                    return Err(e);
                }
            }
        }
        if finished_epoch {
            trainer.end_epoch();
        }
        done = !finished_epoch || trainer.epoch() >= config.epochs || trainer.iteration() >= limit;
        let keep = done || trainer.epoch() % config.checkpoint_every == 0;
        emit_epoch(&mut trainer, &eval_z, keep, &mut artifacts)?;
        log.flush()?;
        info!(
            "epoch {} iteration {} slope {:.4}",
            trainer.epoch(),
            trainer.iteration(),
            trainer.generator.output.slope()
        );
    }
    artifacts.epochs = trainer.epoch();
    artifacts.iterations = trainer.iteration();
    artifacts.final_slope = trainer.generator.output.slope();
    Ok(artifacts)
}

fn emit_epoch(
    trainer: &mut Trainer<'_>,
    eval_z: &Tensor<f32>,
    keep_checkpoint: bool,
    artifacts: &mut RunArtifacts,
) -> Result<()> {
    let stem = artifacts.dir.join(format!(
        "{}-e{:03}-it{:06}",
        artifacts.run_id,
        trainer.epoch(),
        trainer.iteration()
    ));
    let named = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let mut neuron_rng = rng::stream(trainer.config.seed ^ trainer.iteration() as u64, Stream::Eval);
    let (images, record) = trainer.generator.generate_with_rng(eval_z, &mut neuron_rng)?;
    let samples = named("-samples.png");
    emit_sample_grid(&images, &samples)?;
    let preact = named("-preact.png");
    emit_sample_grid(&record.values, &preact)?;
    let hist = named("-hist.csv");
    compute_preactivation_histogram(std::slice::from_ref(&record))?.write_csv(&hist)?;
    artifacts.sample_grids.push(samples);
    artifacts.preactivation_grids.push(preact);
    artifacts.histograms.push(hist);
    if keep_checkpoint {
        trainer.checkpoint().save(&stem)?;
        artifacts.checkpoints.push(stem);
    }
    Ok(())
}
