//! Run manifests: one JSON object per training run, appended to
//! `manifests.jsonl` in the run directory.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use grass::{GrassError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The full configuration as TOML.
    pub config: String,
    pub dataset_sha256: String,
    pub cache_sha256: String,
    pub val_dataset_sha256: Option<String>,
    pub seeds: Seeds,
    pub code_version: String,
    pub deterministic: bool,
    /// Unix seconds.
    pub started_at: f64,
    pub finished_at: f64,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn append_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let line = serde_json::to_string(manifest).expect("manifest serializes");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GrassError::io(path, e))?;
    writeln!(file, "{line}").map_err(|e| GrassError::io(path, e))
}

pub fn read_manifests(path: &Path) -> Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| GrassError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| GrassError::Data {
                line: i + 1,
                field: "manifest".into(),
                message: e.to_string(),
            })
        })
        .collect()
}
