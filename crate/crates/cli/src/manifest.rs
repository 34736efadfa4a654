use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::commands::{io_error, CliError};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_error(path, e))?))
}

/// Provenance record written beside the outputs of one command.
pub struct Manifest {
    command: &'static str,
    config: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn files(paths: &[PathBuf]) -> Result<Vec<Value>, CliError> {
        paths
            .iter()
            .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? })))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let doc = json!({
            "tool": "icvf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "inputs": Self::files(&self.inputs)?,
            "outputs": Self::files(&self.outputs)?,
            "timings": { "wall_seconds": self.started.elapsed().as_secs_f64() },
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| io_error(path, e))
    }
}

/// `<file>.manifest.json`.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
