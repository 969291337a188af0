use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

/// Record of one invocation and the files it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub catalog_version: u32,
    pub params_sha256: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(
        command: String,
        catalog_version: u32,
        params_sha256: String,
        outputs: Vec<PathBuf>,
    ) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command,
            catalog_version,
            params_sha256,
            timestamp,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
