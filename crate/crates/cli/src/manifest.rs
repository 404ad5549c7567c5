//! Run manifests: everything needed to repeat a run, plus input hashes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, Result};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    /// Seconds since the Unix epoch. The only non-reproducible field.
    pub created_unix: u64,
}

/// What a subcommand read and wrote.
#[derive(Debug, Default)]
pub struct Record {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Default manifest location when `--manifest` is not given.
    pub manifest: Option<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn seeds(config: &Value) -> Vec<u64> {
    let Some(map) = config.as_object() else { return Vec::new() };
    map.iter().filter(|(k, _)| k.as_str() == "seed" || k.ends_with("_seed")).filter_map(|(_, v)| v.as_u64()).collect()
}

pub fn write(subcommand: &str, config: Value, record: &Record, path: &Path) -> Result<()> {
    for out in &record.outputs {
        if !out.exists() {
            return Err(CliError::invalid(format!("declared output {} was not written", out.display())));
        }
    }
    let mut inputs = Vec::with_capacity(record.inputs.len());
    for p in &record.inputs {
        inputs.push(InputFile { path: p.clone(), sha256: sha256_file(p)? });
    }
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: seeds(&config),
        config,
        inputs,
        outputs: record.outputs.clone(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}
