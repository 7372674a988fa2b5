//! Run manifests: one per output location, recording inputs and output hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use inviv::pipeline::content_hash;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Fully resolved configuration as used by the run.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    /// Output file name (relative to `output_dir`) to content hash.
    pub outputs: BTreeMap<String, String>,
}

/// Hashes the given files inside `dir`.
pub fn hash_outputs(dir: &Path, files: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        out.insert(f.clone(), content_hash(&bytes));
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path, stem: Option<&str>) -> PathBuf {
    match stem {
        Some(s) => dir.join(format!("{s}.{MANIFEST_NAME}")),
        None => dir.join(MANIFEST_NAME),
    }
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))
}

/// Compares freshly produced hashes with a recorded manifest.
pub fn compare(recorded: &RunManifest, fresh: &BTreeMap<String, String>) -> Result<(), CliError> {
    let mut problems = Vec::new();
    for (file, hash) in fresh {
        match recorded.outputs.get(file) {
            Some(h) if h == hash => {}
            Some(_) => problems.push(format!("{file} differs")),
            None => problems.push(format!("{file} not in manifest")),
        }
    }
    for file in recorded.outputs.keys() {
        if !fresh.contains_key(file) {
            problems.push(format!("{file} was not produced"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(problems.join("; ")))
    }
}

/// Scratch directory removed on drop.
pub struct ScratchDir(pub PathBuf);

impl ScratchDir {
    pub fn new() -> Result<Self, CliError> {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let p = std::env::temp_dir().join(format!("inviv-check-{}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&p)?;
        Ok(Self(p))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}
