//! The objective × discriminator batch norm × neuron kind sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use log::{error, info};

use crate::error::{Error, Result};
use crate::harness::artifacts::GUTTER;
use crate::harness::config::ExperimentConfig;
use crate::harness::train::train;
use crate::neurons::NeuronMode;
use crate::objectives::ObjectiveKind;
use crate::optim::OptimizerKind;

pub const MANIFEST_NAME: &str = "matrix-manifest.csv";
pub const OVERVIEW_NAME: &str = "matrix-overview.png";

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Planned,
    Completed,
    Failed(String),
}

impl RunStatus {
    fn tag(&self) -> &'static str {
        match self {
            RunStatus::Planned => "planned",
            RunStatus::Completed => "completed",
            RunStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixEntry {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    /// Last sample grid and preactivation grid of a completed run.
    pub grids: Option<(PathBuf, PathBuf)>,
}

impl MatrixEntry {
    pub fn run_id(&self) -> String {
        self.config.run_id()
    }

    pub fn optimizer(&self) -> OptimizerKind {
        self.config.optimizer_kind()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixReport {
    pub manifest: PathBuf,
    pub overview: Option<PathBuf>,
    pub entries: Vec<MatrixEntry>,
}

/// The twelve run configs: {GAN, WGAN, WGAN-GP} × {batch norm in D, none}
/// × {DBN, SBN}, each with its objective's optimizer and critic schedule.
pub fn matrix_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::with_capacity(12);
    for objective in [ObjectiveKind::Gan, ObjectiveKind::Wgan, ObjectiveKind::WganGp] {
        for bn_in_d in [true, false] {
            for mode in [NeuronMode::Deterministic, NeuronMode::Stochastic] {
                out.push(ExperimentConfig {
                    objective,
                    bn_in_d: Some(bn_in_d),
                    neuron_mode: mode,
                    optimizer: None,
                    n_critic: None,
                    run_id: None,
                    ..base.clone()
                });
            }
        }
    }
    out
}

fn write_manifest(path: &Path, entries: &[MatrixEntry]) -> Result<()> {
    let mut text = String::from("run_id,objective,bn_in_d,neuron_mode,optimizer,n_critic,status,detail\n");
    for e in entries {
        let detail = match &e.status {
            RunStatus::Failed(msg) => msg.replace([',', '\n'], " "),
            _ => String::new(),
        };
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{detail}",
            e.run_id(),
            e.config.objective.tag(),
            e.config.model_spec().bn_in_d,
            e.config.neuron_mode.tag(),
            e.optimizer().tag(),
            e.config.adversarial().n_critic,
            e.status.tag(),
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run every configuration in turn. A failing run is recorded in the
/// manifest and the sweep moves on. With `dry_run` only the manifest is
/// written.
pub fn run_matrix(base: &ExperimentConfig, dry_run: bool) -> Result<MatrixReport> {
    let dir = &base.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut entries: Vec<MatrixEntry> = matrix_configs(base)
        .into_iter()
        .map(|config| MatrixEntry {
            config,
            status: RunStatus::Planned,
            grids: None,
        })
        .collect();
    write_manifest(&manifest, &entries)?;
    if dry_run {
        return Ok(MatrixReport {
            manifest,
            overview: None,
            entries,
        });
    }
    for i in 0..entries.len() {
        info!("matrix run {}/{}: {}", i + 1, entries.len(), entries[i].run_id());
        match train(&entries[i].config) {
            Ok(run) => {
                entries[i].status = RunStatus::Completed;
                entries[i].grids = run
                    .sample_grids
                    .last()
                    .cloned()
                    .zip(run.preactivation_grids.last().cloned());
            }
            Err(e) => {
                error!("matrix run {} failed: {e}", entries[i].run_id());
                entries[i].status = RunStatus::Failed(e.to_string());
            }
        }
        write_manifest(&manifest, &entries)?;
    }
    let overview = dir.join(OVERVIEW_NAME);
    compose_overview(&entries, &overview)?;
    Ok(MatrixReport {
        manifest,
        overview: Some(overview),
        entries,
    })
}

/// One row per objective; each row holds, per run, its sample grid beside
/// its preactivation grid. Runs without grids leave a grey cell.
fn compose_overview(entries: &[MatrixEntry], path: &Path) -> Result<()> {
    let mut cells = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = match &e.grids {
            Some((s, p)) => Some((image::open(s)?.to_luma8(), image::open(p)?.to_luma8())),
            None => None,
        };
        cells.push(pair);
    }
    let tile = cells
        .iter()
        .flatten()
        .map(|(s, _)| s.width())
        .max()
        .unwrap_or(crate::harness::artifacts::grid_side(8) as u32);
    let gap = 4 * GUTTER as u32;
    let (cols, rows) = (4u32, entries.len().div_ceil(4) as u32);
    let cell_w = 2 * tile + GUTTER as u32;
    let width = cols * cell_w + (cols + 1) * gap;
    let height = rows * tile + (rows + 1) * gap;
    let mut canvas = GrayImage::from_pixel(width, height, Luma([255]));
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        let (x0, y0) = (gap + c * (cell_w + gap), gap + r * (tile + gap));
        match cell {
            Some((s, p)) => {
                image::imageops::replace(&mut canvas, s, x0 as i64, y0 as i64);
                image::imageops::replace(&mut canvas, p, (x0 + tile + GUTTER as u32) as i64, y0 as i64);
            }
            None => {
                for y in y0..y0 + tile {
                    for x in x0..x0 + cell_w {
                        canvas.put_pixel(x, y, Luma([128]));
                    }
                }
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_distinct_runs_with_objective_optimizers() {
        let configs = matrix_configs(&ExperimentConfig::default());
        assert_eq!(configs.len(), 12);
        let mut ids: Vec<_> = configs.iter().map(|c| c.run_id()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        for c in &configs {
            let want = match c.objective {
                ObjectiveKind::Wgan => OptimizerKind::Rmsprop,
                _ => OptimizerKind::Adam,
            };
            assert_eq!(c.optimizer_kind(), want);
        }
    }

    #[test]
    fn dry_run_writes_only_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let base = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let report = run_matrix(&base, true).unwrap();
        let text = std::fs::read_to_string(&report.manifest).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(report.entries.iter().all(|e| e.status == RunStatus::Planned));
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
    }
}
