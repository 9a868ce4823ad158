//! Checkpoints: config echo, parameters, optimizer state and normalization
//! in one JSON file. Maps are ordered and floats print in shortest
//! round-trip form, so load → save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::models::LatentOdeModel;
use crate::tensor::{Parameterized, Tensor};
use crate::training::AdamaxState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub params: BTreeMap<String, ParamRecord>,
    pub optimizer: AdamaxState,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        model: &LatentOdeModel,
        optimizer: &AdamaxState,
        epoch: usize,
        norm: &NormStats,
    ) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    ParamRecord {
                        shape: p.shape().to_vec(),
                        data: p.value().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            epoch,
            params,
            optimizer: optimizer.clone(),
            norm: norm.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the model from the echoed config and overwrites every
    /// parameter. Names and shapes must match exactly.
    pub fn model(&self) -> Result<LatentOdeModel> {
        let mut model = LatentOdeModel::new(&self.config.model, self.config.training.seed)?;
        let expected: Vec<String> = model
            .params()
            .iter()
            .map(|p| p.name().to_string())
            .collect();
        if expected.len() != self.params.len()
            || expected.iter().any(|n| !self.params.contains_key(n))
        {
            let stored: Vec<&String> = self.params.keys().collect();
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter names differ: model has {expected:?}, checkpoint has {stored:?}"
            )));
        }
        for p in model.params_mut() {
            let rec = &self.params[p.name()];
            if rec.shape != p.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{}: shape {:?} vs stored {:?}",
                    p.name(),
                    p.shape(),
                    rec.shape
                )));
            }
            let value = Tensor::new(rec.shape.clone(), rec.data.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", p.name())))?;
            p.set_value(value)?;
        }
        Ok(model)
    }
}
