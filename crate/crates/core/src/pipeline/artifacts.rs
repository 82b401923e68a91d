//! Artifact layout and hash-checked JSON I/O.
//!
//! JSON artifacts wrap their payload as `{config_hash, stage, data}`.
//! JSONL and CSV artifacts stay plain; their SHA-256 digests are recorded
//! in the JSON artifact of the stage that wrote them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG: &str = "config.json";
pub const WINDOWS: &str = "windows.jsonl";
pub const CORPUS_STATS: &str = "corpus_stats.json";
pub const CLUSTERS: &str = "clusters.json";
pub const ASSIGNMENT: &str = "assignment.json";
pub const PATTERNS: &str = "patterns.json";
pub const TRAIN: &str = "train.json";
pub const PAC: &str = "pac.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TIMINGS: &str = "timings.json";
pub const TRACES_DIR: &str = "traces";
pub const MODELS_DIR: &str = "models";

pub fn trace_path(c: usize) -> PathBuf {
    Path::new(TRACES_DIR).join(format!("cluster_{c}.csv"))
}

pub fn model_path(c: usize) -> PathBuf {
    Path::new(MODELS_DIR).join(format!("cluster_{c}.json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    config_hash: String,
    stage: String,
    data: T,
}

#[derive(Debug, Deserialize)]
struct Header {
    config_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write bytes and return their digest.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

pub(crate) fn write_json<T: Serialize>(
    path: &Path,
    stage: &str,
    hash: &str,
    data: &T,
) -> Result<()> {
    let env = Envelope {
        config_hash: hash.to_string(),
        stage: stage.to_string(),
        data,
    };
    let mut bytes = serde_json::to_vec_pretty(&env)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes).map(|_| ())
}

/// Read an artifact written by `dimsum {command}`, refusing one produced
/// under a different config.
pub(crate) fn read_json<T: DeserializeOwned>(
    path: &Path,
    command: &'static str,
    hash: &str,
) -> Result<T> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                command,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    };
    let header: Header = serde_json::from_slice(&bytes).map_err(parse_err)?;
    if header.config_hash != hash {
        return Err(Error::ConfigMismatch {
            path: path.to_path_buf(),
            found: header.config_hash,
            expected: hash.to_string(),
            command,
        });
    }
    let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(parse_err)?;
    Ok(env.data)
}

/// Payload of an artifact without checking its config hash; `None` when
/// the file does not exist.
pub fn read_unchecked<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => {
            let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            Ok(Some(env.data))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Check a plain artifact against the digest its producing stage recorded.
pub(crate) fn verify_digest(path: &Path, expected: &str, command: &'static str) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                command,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if sha256_hex(&bytes) != expected {
        return Err(Error::Tampered {
            path: path.to_path_buf(),
            command,
        });
    }
    Ok(())
}

/// Wall-clock seconds per stage. Kept apart from the deterministic
/// artifacts.
pub fn read_timings(dir: &Path) -> BTreeMap<String, f64> {
    fs::read(dir.join(TIMINGS))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default()
}

pub(crate) fn record_timing(dir: &Path, stage: &str, secs: f64) -> Result<()> {
    let mut t = read_timings(dir);
    t.insert(stage.to_string(), secs);
    let mut bytes = serde_json::to_vec_pretty(&t)?;
    bytes.push(b'\n');
    write_bytes(&dir.join(TIMINGS), &bytes).map(|_| ())
}
