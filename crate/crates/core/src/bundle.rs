//! Versioned JSON persistence for trained pipelines.
//!
//! A bundle holds one regime model per factor group, the optional LSTM head
//! and every setting needed to rebuild the inputs those models were fitted
//! on. File paths are deliberately not stored, so two runs of the same
//! configuration write identical bytes wherever they run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::BarrierConfig;
use crate::lstm::{LstmHyper, LstmParams};
use crate::trainers::{FitConfig, RegimeModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub name: String,
    /// Observation columns, in the order the model expects them.
    pub columns: Vec<String>,
    pub fit: FitConfig,
    pub model: RegimeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub params: LstmParams,
    pub hyper: LstmHyper,
    pub train_accuracy: f64,
    pub best_loss: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub seed: u64,
    pub barrier: BarrierConfig,
    /// Leading bars dropped from every input before the models see it.
    pub warmup: usize,
    pub groups: Vec<GroupModel>,
    pub head: Option<HeadModel>,
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        if self.groups.is_empty() {
            return Err(Error::InvalidConfig("a bundle needs at least one group model".into()));
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::InvalidConfig("model bundle has no schema_version".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            });
        }
        let bundle: ModelBundle = serde_json::from_value(value)?;
        if bundle.groups.is_empty() {
            return Err(Error::InvalidConfig("model bundle has no group models".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn head(&self) -> Result<&HeadModel> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model bundle has no LSTM head; run train-lstm first".into()))
    }

    /// Every observation column used by any group, first use first.
    pub fn columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            for c in &g.columns {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out
    }
}
