//! Atomic artifact writing and the per-command manifest that ties every
//! artifact to the configuration fingerprint that produced it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `bytes` to `path` via a temporary file and rename, creating
/// parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    shapcast::model::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Serialises `value` as a JSON object with a `config_fingerprint` field.
pub fn json_with_fingerprint<T: Serialize>(value: &T, fingerprint: &str) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("config_fingerprint".into(), fingerprint.into());
    }
    Ok(v)
}

#[derive(Debug, Serialize)]
struct Entry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    config_fingerprint: String,
    artifacts: Vec<Entry>,
    #[serde(skip)]
    dir: PathBuf,
}

impl Manifest {
    pub fn new(command: &str, fingerprint: &str, dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_fingerprint: fingerprint.to_string(),
            artifacts: Vec::new(),
            dir: dir.to_path_buf(),
        }
    }

    /// Writes an artifact and records its digest.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_bytes(path, bytes)?;
        let shown = path.strip_prefix(&self.dir).unwrap_or(path);
        self.artifacts.push(Entry {
            path: shown.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Records a file that was written by other means.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let shown = path.strip_prefix(&self.dir).unwrap_or(path);
        self.artifacts.push(Entry {
            path: shown.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let v = json_with_fingerprint(value, &self.config_fingerprint)?;
        self.write(path, serde_json::to_string_pretty(&v)?.as_bytes())
    }

    /// Saves the manifest as `manifest_<command>.json` in its directory.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join(format!("manifest_{}.json", self.command));
        write_bytes(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}
