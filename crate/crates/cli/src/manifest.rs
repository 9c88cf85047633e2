use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dnut_core::simulation::SimulationConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a result set.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub engine: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: SimulationConfig,
    pub grid: Vec<f64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &SimulationConfig, grid: &[f64], inputs: Vec<InputDigest>) -> Self {
        RunManifest {
            engine: "dnut",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: config.clone(),
            grid: grid.to_vec(),
            inputs,
            outputs: Vec::new(),
        }
    }
}

pub fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = Sha256::digest(&bytes);
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}
