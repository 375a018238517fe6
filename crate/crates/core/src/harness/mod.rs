//! Training runs and everything they write to disk.

pub mod artifacts;
pub mod config;
pub mod matrix;
pub mod sampling;
pub mod train;

pub use artifacts::{
    compute_preactivation_histogram, emit_sample_grid, postprocess_real, render_grid, Histogram, LossRecord,
    PostprocessStrategy,
};
pub use config::ExperimentConfig;
pub use matrix::{run_matrix, MatrixEntry, MatrixReport};
pub use sampling::{generate_from_latent, generate_samples, load_generator, Samples};
pub use train::{train, train_with_dataset, CriticStats, RunArtifacts, Trainer};
