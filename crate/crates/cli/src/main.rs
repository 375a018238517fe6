use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use binarygan_core::harness::{
    compute_preactivation_histogram, emit_sample_grid, generate_samples, load_generator, postprocess_real, run_matrix,
    train, PostprocessStrategy,
};
use binarygan_core::optim::OptimizerKind;
use binarygan_core::rng::{stream, Stream};
use binarygan_core::{ExperimentConfig, Family, NeuronMode, ObjectiveKind};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Train and inspect GANs whose generators emit binary pixels.
#[derive(Parser, Debug)]
#[command(name = "binarygan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train(Overrides),
    /// Generate samples from a checkpoint and save them as a grid.
    Sample(SampleArgs),
    /// Histogram the output preactivations of a checkpoint's generator.
    Histogram(HistogramArgs),
    /// Run the objective x batch-norm x neuron-kind sweep.
    Matrix {
        #[command(flatten)]
        overrides: Overrides,
        /// Only write the manifest of planned runs.
        #[arg(long)]
        dry_run: bool,
    },
}

/// Settings layered over the config file. Flags win over the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the training images; falls back to BINARYGAN_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// gan, wgan or wgan-gp.
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    /// dbn, sbn or real.
    #[arg(long)]
    neuron_mode: Option<NeuronMode>,
    /// mlp or cnn.
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Gradient penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_critic: Option<usize>,
    #[arg(long)]
    clip_bound: Option<f64>,
    /// adam or rmsprop.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Batch norm in the discriminator.
    #[arg(long)]
    bn_in_d: Option<bool>,
    /// Keep the neuron slope fixed.
    #[arg(long)]
    no_anneal: bool,
    /// Train on only the first N images.
    #[arg(long)]
    subset: Option<usize>,
    /// Stop after N generator iterations.
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            seed => seed,
            output_dir => output_dir,
            objective => objective,
            neuron_mode => neuron_mode,
            family => family,
            epochs => epochs,
            batch_size => batch_size,
            lambda => gp_lambda,
            clip_bound => clip_bound,
            learning_rate => learning_rate,
            checkpoint_every => checkpoint_every,
        );
        if self.data_dir.is_some() {
            c.data_dir = self.data_dir.clone();
        }
        if self.n_critic.is_some() {
            c.n_critic = self.n_critic;
        }
        if self.optimizer.is_some() {
            c.optimizer = self.optimizer;
        }
        if self.bn_in_d.is_some() {
            c.bn_in_d = self.bn_in_d;
        }
        if self.subset.is_some() {
            c.subset = self.subset;
        }
        if self.max_iterations.is_some() {
            c.max_iterations = self.max_iterations;
        }
        if self.run_id.is_some() {
            c.run_id = self.run_id.clone();
        }
        if self.no_anneal {
            c.anneal = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint manifest, data file or their shared stem.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of images; must be a perfect square.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write the preactivation grid here.
    #[arg(long)]
    preact_out: Option<PathBuf>,
    /// Binarize real-valued outputs: threshold or bernoulli.
    #[arg(long)]
    postprocess: Option<PostprocessStrategy>,
}

#[derive(Args, Debug)]
struct HistogramArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn run_train(overrides: &Overrides) -> Result<()> {
    let config = overrides.resolve()?;
    info!("training {}", config.run_id());
    let run = train(&config)?;
    println!(
        "{}: {} iterations over {} epochs, final slope {:.4}",
        run.run_id, run.iterations, run.epochs, run.final_slope
    );
    println!("artifacts in {}", run.dir.display());
    if let Some(last) = run.checkpoints.last() {
        println!("last checkpoint {}", last.display());
    }
    Ok(())
}

fn run_sample(args: &SampleArgs) -> Result<()> {
    let mut g = load_generator(&args.checkpoint)?;
    let mut rng = stream(args.seed, Stream::Eval);
    let samples = generate_samples(&mut g, args.count, &mut rng)?;
    let images = match args.postprocess {
        Some(_) if g.output.mode().is_binary() => {
            bail!("--postprocess applies only to real-valued generators")
        }
        Some(strategy) => postprocess_real(&samples.images, strategy, &mut rng),
        None => samples.images,
    };
    ensure_parent(&args.out)?;
    emit_sample_grid(&images, &args.out)?;
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.preact_out {
        ensure_parent(path)?;
        emit_sample_grid(&samples.preactivations.values, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_histogram(args: &HistogramArgs) -> Result<()> {
    let mut g = load_generator(&args.checkpoint)?;
    let samples = generate_samples(&mut g, args.count, &mut stream(args.seed, Stream::Eval))?;
    let hist = compute_preactivation_histogram(&[samples.preactivations])?;
    ensure_parent(&args.out)?;
    hist.write_csv(&args.out)?;
    println!("wrote {} ({} values)", args.out.display(), hist.total());
    Ok(())
}

fn run_sweep(overrides: &Overrides, dry_run: bool) -> Result<()> {
    let base = overrides.resolve()?;
    let report = run_matrix(&base, dry_run)?;
    for e in &report.entries {
        println!("{:<40} {:?}", e.run_id(), e.status);
    }
    println!("manifest {}", report.manifest.display());
    if let Some(o) = &report.overview {
        println!("overview {}", o.display());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(o) => run_train(o),
        Command::Sample(a) => run_sample(a),
        Command::Histogram(a) => run_histogram(a),
        Command::Matrix { overrides, dry_run } => run_sweep(overrides, *dry_run),
    }
}
