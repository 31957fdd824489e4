use std::path::Path;

use active_testing::engine::SearchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to repeat a run: written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: Option<SearchConfig>,
    pub model_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<SearchConfig>, model_sha256: Option<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            args: std::env::args().skip(1).collect(),
            seed,
            config,
            model_sha256,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
