//! Output directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Loaded, ModelKind, Seeds};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    manifest_version: u32,
    subcommand: &'a str,
    model: Option<ModelKind>,
    config_sha256: &'a str,
    seeds: &'a Seeds,
    config: &'a str,
    artifacts: &'a [ArtifactEntry],
    notes: &'a BTreeMap<String, serde_json::Value>,
}

/// A directory of artifacts from one subcommand. The manifest is only
/// written by [`ArtifactDir::finish`], after everything else.
#[derive(Debug)]
pub struct ArtifactDir {
    dir: PathBuf,
    written: Vec<ArtifactEntry>,
    notes: BTreeMap<String, serde_json::Value>,
}

impl ArtifactDir {
    pub fn create(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
        }
        Ok(Self {
            dir,
            written: Vec::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` to `name`, which may contain subdirectories.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.retain(|a| a.path != name);
        self.written.push(ArtifactEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.notes.insert(key.to_string(), v);
    }

    pub fn finish(self, loaded: &Loaded, subcommand: &str, model: Option<ModelKind>) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: "stlf",
            version: env!("CARGO_PKG_VERSION"),
            manifest_version: MANIFEST_VERSION,
            subcommand,
            model,
            config_sha256: &loaded.hash,
            seeds: &loaded.config.seeds,
            config: &loaded.canonical,
            artifacts: &self.written,
            notes: &self.notes,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
