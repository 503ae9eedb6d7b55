//! Run directories and manifests.
//!
//! Each command writes to `<root>/<command>/<timestamp>-<hash>/`, where the
//! hash covers the invocation and the contents of its input files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Invocation;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Invocation,
    pub seed: u64,
    /// SHA-256 over the invocation and input digests.
    pub input_hash: String,
    pub inputs: Vec<InputFile>,
    /// File names inside the run directory.
    pub outputs: Vec<String>,
    pub created: String,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn input_hash(invocation: &Invocation, inputs: &[InputFile]) -> String {
    let body = serde_json::to_vec(&(invocation, inputs)).expect("invocation serializes");
    hex::encode(Sha256::digest(body))
}

/// Creates a fresh run directory, adding a numeric suffix when two runs land
/// in the same second.
pub fn create_run_dir(root: &Path, command: &str, hash: &str, stamp: &str) -> io::Result<PathBuf> {
    let parent = root.join(command);
    fs::create_dir_all(&parent)?;
    let base = format!("{stamp}-{}", &hash[..12]);
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("suffix search is unbounded")
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> io::Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(io::Error::other)?;
    fs::write(dir.join(MANIFEST), json + "\n")
}

pub fn read_manifest(path: &Path) -> io::Result<RunManifest> {
    let path = if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    };
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
