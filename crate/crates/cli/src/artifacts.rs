//! Checkpoint files on disk and the standard artifact layout of a run
//! directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use sptx_core::autoencoder::AutoencoderStack;
use sptx_core::bspline::AlphaSchedule;
use sptx_core::checkpoint::{decode, encode, sha256_hex, NamedTensor};
use sptx_core::transformer::ModelParams;

/// Well-known file names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn base(&self) -> PathBuf {
        self.dir.join("base.sptx")
    }

    pub fn fine(&self) -> PathBuf {
        self.dir.join("fine.sptx")
    }

    pub fn linear(&self) -> PathBuf {
        self.dir.join("linear.sptx")
    }

    pub fn task(&self) -> PathBuf {
        self.dir.join("task.sptx")
    }

    pub fn superposed(&self) -> PathBuf {
        self.dir.join("superposed.sptx")
    }

    pub fn expert_log(&self, which: &str) -> PathBuf {
        self.dir.join(format!("expert_{which}_log.csv"))
    }

    pub fn superpose_log(&self) -> PathBuf {
        self.dir.join("superpose_log.csv")
    }

    pub fn epochs(&self) -> PathBuf {
        self.dir.join("epochs.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn figure(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_entries(path: &Path) -> anyhow::Result<Vec<NamedTensor>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

pub fn save_model(path: &Path, params: &ModelParams<f32>) -> anyhow::Result<()> {
    write_bytes(path, &encode(&params.to_named_tensors()))
}

pub fn load_model(path: &Path) -> anyhow::Result<ModelParams<f32>> {
    let entries = read_entries(path)?;
    ModelParams::from_named_tensors(&entries)
        .with_context(|| format!("reconstructing model from {}", path.display()))
}

/// The superposed artifact bundles the hard-merged parameters, the trained
/// schedule and the autoencoder stack in one checkpoint.
pub fn save_superposed(
    path: &Path,
    merged: &ModelParams<f32>,
    schedule: &AlphaSchedule<f32>,
    stack: &AutoencoderStack<f32>,
) -> anyhow::Result<()> {
    let mut entries = merged.to_named_tensors();
    entries.extend(schedule.to_named_tensors());
    entries.extend(stack.to_named_tensors());
    write_bytes(path, &encode(&entries))
}

pub fn load_superposed(
    path: &Path,
) -> anyhow::Result<(ModelParams<f32>, AlphaSchedule<f32>, AutoencoderStack<f32>)> {
    let entries = read_entries(path)?;
    let merged = ModelParams::from_named_tensors(&entries)
        .with_context(|| format!("reconstructing merged model from {}", path.display()))?;
    let schedule = AlphaSchedule::from_named_tensors(&entries)
        .with_context(|| format!("reconstructing schedule from {}", path.display()))?;
    let stack = AutoencoderStack::from_named_tensors(
        &entries,
        merged.cfg.hidden,
        merged.cfg.n_layers,
    )
    .with_context(|| format!("reconstructing autoencoders from {}", path.display()))?;
    Ok((merged, schedule, stack))
}

pub fn file_checksum(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
