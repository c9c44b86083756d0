//! Per-command run records and content hashes of inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Git-style object hash: files hash as `blob <len>\0<bytes>`, directories
/// as the sorted list of `<kind> <name>\0<child hash>` records.
pub fn content_hash(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
        return Ok(hex(&h.finalize()));
    }
    let mut children: Vec<(String, PathBuf)> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(path, e))?;
    children.sort();
    let mut tree = Vec::new();
    for (name, p) in children {
        // run records describe a run, they are not part of its content
        if name == RUN_LOG || name.starts_with('.') {
            continue;
        }
        let kind = if p.is_dir() { "tree" } else { "blob" };
        tree.extend_from_slice(format!("{kind} {name}\0{}\n", content_hash(&p)?).as_bytes());
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", tree.len()));
    h.update(&tree);
    Ok(hex(&h.finalize()))
}

/// Combined hash of several inputs, in the given order.
pub fn inputs_hash(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(content_hash(p)?);
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}

pub const RUN_LOG: &str = "run-log.json";

#[derive(Serialize)]
pub struct RunLog {
    pub command: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub inputs_hash: String,
    /// Hash of the produced artifact, when it is cheap to take.
    pub output_hash: Option<String>,
    pub wall_time_seconds: f64,
    pub config: serde_json::Value,
}

pub struct RunTimer {
    start: Instant,
}

impl RunTimer {
    pub fn start() -> Self {
        RunTimer { start: Instant::now() }
    }

    /// Builds the record; `config` is hashed in its canonical JSON form.
    pub fn finish<C: Serialize>(&self, command: &str, seed: Option<u64>, config: &C, inputs: &[&Path]) -> Result<RunLog> {
        let config = serde_json::to_value(config)?;
        Ok(RunLog {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            inputs_hash: inputs_hash(inputs)?,
            output_hash: None,
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
            config,
        })
    }
}

impl RunLog {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::fsutil::write_atomic(path, &json)
    }
}
