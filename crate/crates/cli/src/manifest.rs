use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".ohem.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// sha256 of `config`.
    pub config_hash: String,
    /// The effective configuration after flag overrides, as `key = value` lines.
    pub config: String,
    /// Input files with their sha256.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the command, relative to the output directory.
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_hash: sha256_hex(config.as_bytes()),
            config,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_at = now();
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    #[cfg(test)]
    pub fn read(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                std::io::Error::new(
                    e.kind(),
                    format!(
                        "{} is in use by another run (remove {} if that run is gone)",
                        dir.display(),
                        path.display()
                    ),
                )
            } else {
                e
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
