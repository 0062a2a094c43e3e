//! Run manifests: what produced an artifact, and how to produce it again.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    /// SHA-256 of the parsed command configuration as JSON.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

pub fn build_id() -> String {
    format!(
        "{} {} {}-{}{}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        option_env!("MFCODEC_BUILD_ID")
            .map(|b| format!(" {b}"))
            .unwrap_or_default(),
    )
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn begin(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let digest = hex(&Sha256::digest(serde_json::to_vec(&config)?));
        let started = now();
        Ok(Self {
            command: command.to_string(),
            command_line: std::env::args().collect(),
            config_digest: digest,
            config,
            seed,
            build: build_id(),
            started_unix: started,
            finished_unix: started,
            artifacts: Vec::new(),
        })
    }

    pub fn add(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The manifest written next to a single-file artifact.
pub fn sidecar(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
