//! Every run writes a manifest: the resolved config, the seed, and
//! content hashes of all inputs — enough to reproduce the run
//! byte-for-byte. No timestamps, by design.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path -> hex sha256 of its content.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let body =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let digest = Sha256::digest(&body);
    Ok(hex_string(&digest))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(
    command: &str,
    config: &RunConfig,
    inputs: &[&PathBuf],
    out_dir: &Path,
) -> Result<()> {
    let mut hashed = BTreeMap::new();
    for path in inputs {
        hashed.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        inputs: hashed,
    };
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
