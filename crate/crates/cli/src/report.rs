//! Machine-readable run reports: every subcommand emits one JSON file
//! that pins down the run (command, config echo, input digest, seed)
//! plus its per-section results, with stable key order for diffing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::AppError;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub peers: usize,
    pub records: usize,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputDigest>,
    pub config: serde_json::Value,
    pub sections: BTreeMap<String, serde_json::Value>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: None,
            profile: None,
            input: None,
            config: serde_json::Value::Null,
            sections: BTreeMap::new(),
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        self.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn add_section<T: Serialize>(&mut self, name: &str, value: &T) {
        self.sections.insert(
            name.to_owned(),
            serde_json::to_value(value).expect("section serializes"),
        );
    }

    /// Write `<command>_report.json` under `out_dir` and return the path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, AppError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| AppError::input(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join(format!("{}_report.json", self.command));
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, json)
            .map_err(|e| AppError::input(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// SHA-256 of the raw file bytes, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String, AppError> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::input(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}
