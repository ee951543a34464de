//! Run manifest: the JSON record that makes every output directory
//! self-describing and reproducible.

use crate::codec::CodecConfig;
use crate::error::{Result, SicError};
use crate::inn::InnConfig;
use crate::training::TrainSchedule;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::process::Command;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// the subcommand and arguments that produced this directory
    pub command: String,
    /// dense-codec configuration, for commands that ran one
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<CodecConfig>,
    /// coupling-codec configuration, for commands that ran one
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coupling_config: Option<InnConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schedule: Option<TrainSchedule>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<String>,
    pub out_dir: String,
    /// `git describe` of the working tree, or "unknown"
    pub git: String,
    /// the seed actually used (after any environment override)
    pub seed: u64,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| SicError::data(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join(MANIFEST_NAME), json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| SicError::data(format!("{}: bad manifest: {e}", path.display())))
    }
}

/// Best-effort `git describe --always --dirty`; "unknown" outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
