//! Run manifests: what a command read, wrote and was configured with.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Hash of the training configuration, equal to the checkpoint's.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    /// Input path → sha256 hex of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Null unless timing was requested, so reruns stay byte-identical.
    pub wall_time_ms: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            config_hash: None,
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_ms: None,
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// Lowercase hex sha256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Where a command's manifest goes: the explicit path if given, else
/// `<command>.manifest.json` inside the output directory, with spaces in the
/// command name replaced by `-`.
pub fn manifest_path(explicit: Option<&Path>, out_dir: Option<&Path>, command: &str) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        out_dir.map(|d| d.join(format!("{}.manifest.json", command.replace(' ', "-"))))
    })
}
