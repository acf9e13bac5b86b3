//! Run manifests: what was run, with which settings, on which bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use nabqr_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub started: DateTime<Utc>,
    pub elapsed_seconds: f64,
    pub config: serde_json::Value,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            started: Utc::now(),
            elapsed_seconds: 0.0,
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.push((name.to_string(), seed));
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(digest(path)?);
        Ok(())
    }

    /// Stamps the elapsed time and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        if let Some(c) = self.clock {
            self.elapsed_seconds = c.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        log::info!("manifest {}", path.display());
        Ok(())
    }
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// `<file>.manifest.json` next to a single output file.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
