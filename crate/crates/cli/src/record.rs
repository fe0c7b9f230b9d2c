//! Run directories and the `run.json` record written at the end of a run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use svpgen::error::{Error, Result};

use crate::args::Cli;
use crate::config::ExperimentConfig;

pub const RECORD_FILE: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub tool_version: String,
    /// Parsed command line; replayable with `svpgen rerun`.
    pub cli: Cli,
    /// Fully resolved configuration (file + flags).
    pub config: ExperimentConfig,
    pub started_at: f64,
    pub finished_at: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunRecord {
    /// Writes `dir/run.json` via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RECORD_FILE);
        let tmp = dir.join(format!("{RECORD_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&tmp, text).map_err(|e| Error::Io { path: tmp.clone(), source: e })?;
        fs::rename(&tmp, &path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// First 12 hex digits of the SHA-256 of `key`'s JSON form.
pub fn config_hash(key: &serde_json::Value) -> String {
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// How an existing run directory may be reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reuse {
    Refuse,
    Resume,
    Overwrite,
}

/// `explicit`, or `runs_dir/<command>-<hash>`. An existing directory that
/// already holds a record is refused unless resuming or overwriting.
pub fn prepare_run_dir(explicit: Option<&Path>, runs_dir: &Path, command: &str, key: &serde_json::Value, reuse: Reuse) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => runs_dir.join(format!("{command}-{}", config_hash(key))),
    };
    if dir.join(RECORD_FILE).exists() && reuse == Reuse::Refuse {
        return Err(Error::Param(format!(
            "run directory {} already holds a finished run; pass --resume, --overwrite or another --run-dir",
            dir.display()
        )));
    }
    if reuse == Reuse::Overwrite && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}
