//! Checkpoint files: both policies, the metric history and the config they
//! were trained under, as versioned JSON.

use super::MetricRow;
use crate::config::RunConfig;
use crate::learn::{HighPolicy, LowPolicy, TrainArtifacts};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("stored config hash {stored} does not match its config ({actual})")]
    Corrupt { stored: String, actual: String },
    #[error("checkpoint was trained under config {stored}, current config is {current}")]
    ConfigMismatch { stored: String, current: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub high: HighPolicy,
    pub low: LowPolicy,
    pub history: Vec<MetricRow>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, seed: u64, art: &TrainArtifacts) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            seed,
            high: art.high.clone(),
            low: art.low.clone(),
            history: art.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads a checkpoint and checks its version and internal hash.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found, expected: CHECKPOINT_VERSION });
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        let actual = ck.config.hash();
        if actual != ck.config_hash {
            return Err(CheckpointError::Corrupt { stored: ck.config_hash, actual });
        }
        Ok(ck)
    }

    /// Errors unless `cfg` is the config this checkpoint was trained with.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<(), CheckpointError> {
        let current = cfg.hash();
        if current != self.config_hash {
            return Err(CheckpointError::ConfigMismatch { stored: self.config_hash.clone(), current });
        }
        Ok(())
    }
}
