use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use trafficsim::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs. Rerunning the
/// recorded arguments with `--config <out>/config.toml` reproduces every
/// listed output byte for byte.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, Vec<FileHash>>,
    pub outputs: Vec<FileHash>,
    /// Command-specific details.
    pub extra: serde_json::Value,
}

pub struct Recorder {
    pub out: PathBuf,
    inputs: BTreeMap<String, Vec<FileHash>>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Recorder {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.entry(role.to_string()).or_default().push(FileHash {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Path of an output file, recorded for hashing at the end.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn finish(self, command: &str, seed: u64, config_toml: &str, extra: serde_json::Value) -> Result<()> {
        let cfg_path = self.out.join("config.toml");
        std::fs::write(&cfg_path, config_toml).map_err(|e| Error::io(&cfg_path, e))?;
        let mut outputs = Vec::new();
        for p in &self.outputs {
            outputs.push(FileHash {
                path: p.strip_prefix(&self.out).unwrap_or(p).to_path_buf(),
                sha256: sha256_file(p)?,
            });
        }
        let m = Manifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: sha256_bytes(config_toml.as_bytes()),
            inputs: self.inputs,
            outputs,
            extra,
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
