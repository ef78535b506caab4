//! Per-command manifests: config hash, seed, and content hashes of every
//! input and output, so stale or tampered artifacts are caught downstream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// File name (relative to the output directory) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Command-specific facts, e.g. window split indices.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(AppError::Missing(path.into()));
    }
    Ok(sha256_hex(&std::fs::read(path).map_err(AppError::io(path))?))
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("manifest-{command}.json"))
}

impl Manifest {
    pub fn new(command: &str, config_sha256: &str, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            config_sha256: config_sha256.into(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn add_input(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.inputs.insert(name.into(), hash_file(&dir.join(name))?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), hash_file(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = manifest_path(dir, &self.command);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(AppError::io(&path))
    }

    pub fn read(dir: &Path, command: &str) -> Result<Self> {
        let path = manifest_path(dir, command);
        if !path.exists() {
            return Err(AppError::Missing(path));
        }
        let text = std::fs::read_to_string(&path).map_err(AppError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| AppError::Header { path, msg: e.to_string() })
    }
}

/// Checks `name` against the hash recorded by the `upstream` command.
pub fn verify(dir: &Path, upstream: &str, name: &str, config_sha256: &str) -> Result<()> {
    let m = Manifest::read(dir, upstream)?;
    let path = dir.join(name);
    let recorded = m.outputs.get(name).ok_or_else(|| AppError::Missing(path.clone()))?;
    if *recorded != hash_file(&path)? {
        return Err(AppError::HashMismatch { path, manifest: manifest_path(dir, upstream) });
    }
    if m.config_sha256 != config_sha256 {
        log::warn!("{name} was produced by `{upstream}` under a different config");
    }
    Ok(())
}
