//! Atomic artifact writes, content hashes, run manifests and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use poac_core::autodiff::Params;

use crate::error::{CliError, Result};

pub const CKPT_FORMAT: &str = "poac-ckpt";
pub const CKPT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path, producer: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Dependency {
            path: path.to_path_buf(),
            command: producer,
        });
    }
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Provenance record written next to each command's primary artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.notes.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn save(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Plm,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub module: Module,
    pub seed: u64,
    pub config_hash: String,
}

/// Architecture plus parameters as JSON. Floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<A> {
    pub header: Header,
    pub arch: A,
    pub params: Params,
}

impl<A: Serialize + DeserializeOwned> Checkpoint<A> {
    pub fn new(module: Module, seed: u64, config_hash: String, arch: A, params: Params) -> Self {
        Self {
            header: Header {
                format: CKPT_FORMAT.into(),
                version: CKPT_VERSION,
                module,
                seed,
                config_hash,
            },
            arch,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Loads and checks format, version, module and, unless `force`, the
    /// config hash.
    pub fn load(path: &Path, producer: &'static str, module: Module, expected_hash: &str, force: bool) -> Result<Self> {
        let text = read_text(path, producer)?;
        let bad = |message: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let ck: Self = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let h = &ck.header;
        if h.format != CKPT_FORMAT || h.version != CKPT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", h.format, h.version)));
        }
        if h.module != module {
            return Err(bad(format!("holds a {:?} model, expected {module:?}", h.module)));
        }
        if h.config_hash != expected_hash {
            if !force {
                return Err(bad(format!(
                    "config hash {} does not match the current config ({expected_hash}); rerun `poac {producer}` or pass --force",
                    h.config_hash
                )));
            }
            log::warn!("{}: config hash mismatch ignored (--force)", path.display());
        }
        Ok(ck)
    }
}
