//! Output directory handling and the replay manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    /// Absent for wall-clock dependent outputs, which replay cannot match.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub exit_code: u8,
    pub artifacts: Vec<Artifact>,
}

/// Writes artifacts under one directory and records their digests.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write_raw(&mut self, rel: &str, bytes: &[u8], deterministic: bool) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: deterministic.then(|| hex::encode(Sha256::digest(bytes))),
        });
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_raw(rel, bytes, true)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Records an output whose bytes depend on wall-clock timing.
    pub fn write_timed(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_raw(rel, bytes, false)
    }

    pub fn finish(self, subcommand: &str, seed: Option<u64>, config: serde_json::Value, exit_code: u8) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            tool: "dsfl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            config,
            exit_code,
            artifacts: self.artifacts,
        };
        let path = self.root.join(MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
