use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{code_hash, TrainConfig};
use super::trainer::EpochLog;
use crate::data::EvalReport;
use crate::error::{Error, Result};

/// Record of one run: enough to reproduce it and to aggregate its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_hash: String,
    pub config: TrainConfig,
    pub history: Vec<EpochLog>,
    pub report: Option<EvalReport>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &TrainConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            code_hash: code_hash().to_string(),
            config: cfg.clone(),
            history: Vec::new(),
            report: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
