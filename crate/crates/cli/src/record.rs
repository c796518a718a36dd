//! Run records: what ran, with which configuration, on which inputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// Git-style object hash: sha256 over `blob <len>\0<content>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file, or of a directory as the sorted list of
/// `<blob hash> <relative path>` lines of every file below it.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    if path.is_file() {
        return Ok(blob_hash(&std::fs::read(path)?));
    }
    let mut lines = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::other(e.to_string()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            let rel = rel.to_string_lossy().replace('\\', "/");
            lines.push(format!("{} {rel}\n", blob_hash(&std::fs::read(entry.path())?)));
        }
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", lines.len()).as_bytes());
    for l in &lines {
        h.update(l.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: PathBuf,
    hash: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    /// Flattened `key → value` map; written back as a config file it
    /// re-executes the run.
    config: serde_json::Value,
    inputs: Vec<InputRecord>,
    outputs: Vec<PathBuf>,
}

/// Writes `run.json` into `dir`. Paths are recorded as given.
pub fn write_run_record(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let config_json = config.to_json();
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_hash: blob_hash(serde_json::to_string(&config_json)?.as_bytes()),
        config: config_json,
        inputs: inputs
            .iter()
            .map(|p| Ok(InputRecord { path: p.clone(), hash: content_hash(p)? }))
            .collect::<Result<_, CliError>>()?,
        outputs: outputs.to_vec(),
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(path)
}
