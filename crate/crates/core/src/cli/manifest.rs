//! Run manifests and output-directory locks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;

#[derive(Debug, Serialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub flags: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    /// Paths relative to the output location.
    pub outputs: Vec<String>,
    /// Only present with `--record-time`, so default runs stay byte-identical.
    pub timestamps: Option<Timestamps>,
    pub details: serde_json::Value,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Files an input path stands for: itself, or a directory's regular files
/// (non-recursive), in name order. Lock and manifest files are skipped.
fn expand(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !is_bookkeeping(p))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn is_bookkeeping(p: &Path) -> bool {
    let name = p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    name.ends_with(".lock") || name.ends_with("manifest.json")
}

/// SHA-256 over the command, its flags, and the name, length and bytes of
/// every input file. Directory locations do not enter the digest.
pub fn config_hash(
    command: &str,
    flags: &BTreeMap<String, String>,
    inputs: &[PathBuf],
) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    for (k, v) in flags {
        h.update(k.as_bytes());
        h.update(*b"=");
        h.update(v.as_bytes());
        h.update([0]);
    }
    for input in inputs {
        for file in expand(input)? {
            let bytes = fs::read(&file).map_err(|e| CliError::io(&file, e))?;
            let name = file.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
            h.update(name.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Runtime(format!("serialising manifest: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Exclusive lock held for the duration of a run; removed on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(path: PathBuf) -> Result<Self, CliError> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(
                format!(
                    "{} exists: another run is writing to this output (remove it if stale)",
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
