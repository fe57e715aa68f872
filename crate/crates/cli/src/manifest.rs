use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use esdllm::decoder::GenerationConfig;
use esdllm::model::{ModelConfig, TokenId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to rerun a command, plus where its outputs went.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    #[serde(default)]
    pub configs: Vec<LabeledConfig>,
    pub outputs: Vec<PathBuf>,
    /// Informational only; never part of any compared artifact.
    #[serde(default)]
    pub timings_ms: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledConfig {
    pub label: String,
    #[serde(flatten)]
    pub config: GenerationConfig,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            engine_version: esdllm::ENGINE_VERSION.to_string(),
            model_path: None,
            model_sha256: None,
            model: None,
            seed: 0,
            prompt: Vec::new(),
            configs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&body).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn sha256_tokens(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// `dir/stem.manifest.json` next to `path`.
pub fn manifest_path_for(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}
