use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;
use fnftg_core::config::TrainConfig;
use fnftg_core::kg::{ENTITY_TEXT_FILE, RELATION_TEXT_FILE, TEST_FILE, TRAIN_FILE, VALID_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// `v<crate version>`, followed by the output of `git describe` when the
/// build environment provides it through `FNFTG_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("FNFTG_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// SHA-256 over the dataset files in a fixed order, each prefixed by its name.
/// Missing optional files contribute only their name.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE, ENTITY_TEXT_FILE, RELATION_TEXT_FILE] {
        h.update(name.as_bytes());
        h.update([0u8]);
        let path = dir.join(name);
        if path.exists() {
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Ablation-table row name of the configuration.
    pub configuration: String,
    pub config: TrainConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub dataset_checksum: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

impl RunManifest {
    pub fn start(command: &str, config: &TrainConfig, data: &Path, out: &Path) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            configuration: config.ablation.label(),
            config: config.clone(),
            data: data.to_path_buf(),
            out: out.to_path_buf(),
            dataset_checksum: dataset_checksum(data)?,
            seed: config.seed,
            version: version_string(),
            started_at: Utc::now().to_rfc3339(),
            finished_at: None,
            status: "running".into(),
        })
    }

    pub fn finish(&mut self, status: &str) {
        self.finished_at = Some(Utc::now().to_rfc3339());
        self.status = status.to_string();
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
