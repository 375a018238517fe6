//! On-disk snapshots of a generator/discriminator pair.
//!
//! A checkpoint is two files sharing a stem: `<stem>.manifest`, a TOML
//! document with run metadata and a table of tensors, and `<stem>.bin`, the
//! tensors' values as little-endian `f32` laid end to end in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Sequential;
use crate::rng::{self, Stream};
use crate::tensor::{numel, Tensor};
use crate::zoo::{build_discriminator, build_generator, Discriminator, Generator, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_EXT: &str = "manifest";
pub const DATA_EXT: &str = "bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub run_id: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator iterations.
    pub iteration: usize,
    pub slope: f64,
    pub annealing: bool,
    pub spec: ModelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// `path` with any checkpoint extension removed.
pub fn stem_of(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(MANIFEST_EXT) | Some(DATA_EXT) => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn collect(prefix: &str, net: &Sequential<f32>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (name, t) in net.params().into_iter().chain(net.buffers()) {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

impl Checkpoint {
    pub fn capture(meta: CheckpointMeta, g: &Generator<f32>, d: &Discriminator<f32>) -> Self {
        let mut tensors = Vec::new();
        collect("generator", &g.body, &mut tensors);
        collect("discriminator", &d.body, &mut tensors);
        Checkpoint { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Write both files; returns their paths (manifest, data).
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = stem_of(stem);
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint {
            path: stem.clone(),
            reason: e.to_string(),
        })?;
        let mut bytes = Vec::with_capacity(self.tensors.iter().map(|(_, t)| 4 * t.len()).sum());
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let (mpath, dpath) = (with_ext(&stem, MANIFEST_EXT), with_ext(&stem, DATA_EXT));
        std::fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok((mpath, dpath))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stem = stem_of(path);
        let (mpath, dpath) = (with_ext(&stem, MANIFEST_EXT), with_ext(&stem, DATA_EXT));
        let bad = |reason: String| Error::Checkpoint {
            path: mpath.clone(),
            reason,
        };
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.meta.format != FORMAT_VERSION {
            return Err(bad(format!(
                "format {} is not supported (expected {FORMAT_VERSION})",
                manifest.meta.format
            )));
        }
        let bytes = std::fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let expected: usize = manifest.tensors.iter().map(|e| 4 * numel(&e.shape)).sum();
        if bytes.len() != expected {
            return Err(bad(format!(
                "data file holds {} bytes, manifest describes {expected}",
                bytes.len()
            )));
        }
        let mut at = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n = numel(&entry.shape);
            let values = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            at += 4 * n;
            let t = Tensor::new(entry.shape, values).map_err(|e| bad(format!("{}: {e}", entry.name)))?;
            tensors.push((entry.name, t));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    fn fill(&self, prefix: &str, net: &mut Sequential<f32>) -> Result<()> {
        let names = |named: Vec<(String, &Tensor<f32>)>| -> Vec<String> {
            named.into_iter().map(|(n, _)| format!("{prefix}.{n}")).collect()
        };
        let params = names(net.params());
        self.copy_into(&params, net.params_mut())?;
        let buffers = names(net.buffers());
        self.copy_into(&buffers, net.buffers_mut())
    }

    fn copy_into(&self, names: &[String], targets: Vec<&mut Tensor<f32>>) -> Result<()> {
        for (name, target) in names.iter().zip(targets) {
            let src = self.get(name).ok_or_else(|| {
                Error::Incompatible(format!(
                    "checkpoint has no tensor `{name}` required by {:?}",
                    self.meta.spec
                ))
            })?;
            if src.shape() != target.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    src.shape(),
                    target.shape()
                )));
            }
            *target = src.clone();
        }
        Ok(())
    }

    /// Rebuild the generator with its stored weights, slope and annealing
    /// flag. Its neuron stream restarts from the run seed.
    pub fn restore_generator(&self) -> Result<Generator<f32>> {
        let spec = &self.meta.spec;
        let mut init = rng::stream(self.meta.seed, Stream::Init);
        let mut g = build_generator(spec, &mut init, rng::stream(self.meta.seed, Stream::Neurons))?;
        self.fill("generator", &mut g.body)?;
        g.output.set_slope(self.meta.slope)?;
        g.output.set_annealing(self.meta.annealing);
        Ok(g)
    }

    pub fn restore_discriminator(&self) -> Result<Discriminator<f32>> {
        let mut init = rng::stream(self.meta.seed, Stream::Init);
        let mut d = build_discriminator(&self.meta.spec, &mut init)?;
        self.fill("discriminator", &mut d.body)?;
        Ok(d)
    }
}
