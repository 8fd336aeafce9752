//! Checkpoint container: architecture config, the flat named-array parameter
//! list (including batch-norm running statistics), the fitted preprocessor,
//! and training metadata. JSON with fixed field order, so identical training
//! runs produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RiskModel, RiskModelConfig};
use crate::cohort::preprocess::PreprocessorState;
use crate::error::{CshockError, Result};
use crate::tensor::params::ParamSet;
use crate::util::sha256_hex;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    RiskModel,
    Pretrain,
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTask {
    Shock,
    Mortality,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub fold: Option<usize>,
    pub task: Option<TrainTask>,
    pub best_epoch: Option<usize>,
    pub val_auroc: Option<f64>,
    pub val_loss: Option<f64>,
    pub pretrained_fingerprint: Option<String>,
    /// Pretraining cohort ids, kept for disjointness checks downstream.
    pub pretrain_patient_ids: Option<Vec<String>>,
    /// Average masking rate observed while training a surrogate.
    pub masking_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub config: RiskModelConfig,
    pub in_channels: usize,
    pub schema_fingerprint: String,
    pub params: ParamSet,
    pub preprocessor: Option<PreprocessorState>,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &RiskModel,
        kind: CheckpointKind,
        schema_fingerprint: &str,
        preprocessor: Option<PreprocessorState>,
        meta: CheckpointMeta,
    ) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind,
            config: model.config.clone(),
            in_channels: model.in_channels,
            schema_fingerprint: schema_fingerprint.to_string(),
            params: model.params.clone(),
            preprocessor,
            meta,
        }
    }

    pub fn to_model(&self) -> Result<RiskModel> {
        self.config.validate()?;
        Ok(RiskModel {
            config: self.config.clone(),
            in_channels: self.in_channels,
            params: self.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CshockError::Data(format!(
                "{}: checkpoint schema version {} unsupported",
                path.display(),
                ckpt.schema_version
            )));
        }
        Ok(ckpt)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("checkpoint serializes")
                .as_bytes(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let model = RiskModel::new(RiskModelConfig::custom(vec![3], 2, vec![1]), 5, 42).unwrap();
        let ckpt = ModelCheckpoint::from_model(
            &model,
            CheckpointKind::RiskModel,
            "fp",
            None,
            CheckpointMeta {
                seed: 42,
                ..Default::default()
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt.json");
        let b = dir.path().join("b.ckpt.json");
        ckpt.save(&a).unwrap();
        let loaded = ModelCheckpoint::load(&a).unwrap();
        assert_eq!(ckpt, loaded);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let model2 = loaded.to_model().unwrap();
        assert_eq!(model.params, model2.params);
    }
}
