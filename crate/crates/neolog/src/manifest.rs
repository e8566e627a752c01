//! Reproducibility manifests.
//!
//! Every artifact-producing command writes a sidecar manifest next to its
//! output: tool version, subcommand, seed, flattened configuration, and
//! content hashes of every input and output file. Two runs that should be
//! identical can be compared by diffing two small JSON files instead of the
//! artifacts themselves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tool version recorded in manifests: the crate version at build time.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What one command run did, content-addressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// The subcommand that produced the artifact.
    pub command: String,
    /// Root seed of the run.
    pub seed: u64,
    /// Flattened configuration as key/value strings.
    pub config: BTreeMap<String, String>,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path → content hash.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records one configuration key.
    pub fn record_config(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    /// Flattens a JSON value into dotted config keys: objects recurse,
    /// arrays join with commas, scalars record directly. `prefix` may be
    /// empty for a top-level object.
    pub fn record_config_json(&mut self, prefix: &str, value: &serde_json::Value) {
        match value {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    self.record_config_json(&key, v);
                }
            }
            serde_json::Value::Array(items) => {
                let joined = items
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                self.config.insert(prefix.to_string(), joined);
            }
            serde_json::Value::String(s) => {
                self.config.insert(prefix.to_string(), s.clone());
            }
            other => {
                self.config.insert(prefix.to_string(), other.to_string());
            }
        }
    }

    /// Hashes an input file into the manifest.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let hash = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Hashes an output file into the manifest. Call after the file is
    /// fully written.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let hash = file_sha256(path)?;
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// The sidecar path for an artifact: `<artifact>.manifest.json`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_os_string();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    /// Writes the manifest next to `artifact` and returns the sidecar path.
    pub fn save_for(&self, artifact: &Path) -> Result<PathBuf> {
        let path = Manifest::path_for(artifact);
        self.save(&path)?;
        Ok(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
