//! Provenance records: one entry per output file with the hashes of the
//! files it was made from, the config hash, the seed and the tool version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const FILE_NAME: &str = "manifest.toml";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub command: String,
    pub sha256: String,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Keyed by output path relative to the output directory.
    #[serde(default)]
    pub outputs: BTreeMap<String, Entry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Manifest {
            path,
            message: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let text = toml::to_string(self).map_err(|e| CliError::Manifest {
            path: path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Collects the inputs and outputs of one command run.
#[derive(Debug)]
pub struct Recorder {
    dir: PathBuf,
    command: String,
    config_sha256: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(dir: &Path, command: &str, config_sha256: &str, seed: u64) -> Self {
        Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes every output and merges the entries into the manifest.
    pub fn finish(self) -> Result<()> {
        let mut m = Manifest::load(&self.dir)?;
        for p in &self.outputs {
            let entry = Entry {
                command: self.command.clone(),
                sha256: sha256_file(p)?,
                inputs: self.inputs.clone(),
                config_sha256: self.config_sha256.clone(),
                seed: self.seed,
                tool_version: TOOL_VERSION.to_string(),
            };
            m.outputs.insert(self.key(p), entry);
        }
        m.save(&self.dir)
    }
}
