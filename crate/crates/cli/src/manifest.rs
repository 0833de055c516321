//! `manifest.json` written next to every command's outputs.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use bqf_core::train::TrainConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git object id of a blob in a SHA-256 repository: `sha256("blob {len}\0" ‖ bytes)`.
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config_sha256: Option<String>,
    pub corpus_git_sha256: Option<String>,
    pub effective_config: Option<TrainConfig>,
    pub outputs: Vec<String>,
    pub details: Map<String, Value>,
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started_unix: now(),
            finished_unix: 0.0,
            config_sha256: None,
            corpus_git_sha256: None,
            effective_config: None,
            outputs: Vec::new(),
            details: Map::new(),
        }
    }

    pub fn set_config(&mut self, cfg: &TrainConfig) {
        let canonical = serde_json::to_string(cfg).expect("config serializes");
        self.config_sha256 = Some(sha256_hex(canonical.as_bytes()));
        self.effective_config = Some(cfg.clone());
    }

    pub fn set_corpus(&mut self, bytes: &[u8]) {
        self.corpus_git_sha256 = Some(git_blob_sha256(bytes));
    }

    pub fn extra(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("detail serializes");
        self.details.insert(key.into(), v);
    }

    pub fn finish(mut self, out: &Path) -> Result<()> {
        self.finished_unix = now();
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
