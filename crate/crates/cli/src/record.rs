use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use pcolab::evalkit::RunRow;
use serde::{Deserialize, Serialize};

pub const RECORD_SCHEMA: u32 = 1;

/// What one command did: written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// Artifact name to path.
    pub outputs: BTreeMap<String, String>,
    /// Metric rows for cross-run comparison.
    #[serde(default)]
    pub rows: Vec<RunRow>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Reads a record, rejecting other schema versions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: RunRecord = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        anyhow::ensure!(
            r.schema_version == RECORD_SCHEMA,
            "{}: schema version {} (expected {RECORD_SCHEMA})",
            path.display(),
            r.schema_version
        );
        Ok(r)
    }
}
