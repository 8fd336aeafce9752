//! Value-level risk loss functions and the label-free value function used
//! for interpretation. The graph-building counterparts live on `RiskModel`;
//! these plain implementations serve logging, evaluation, and tests.

use serde::{Deserialize, Serialize};

use super::{apply_mask, RiskModel};
use crate::cohort::preprocess::PreparedRecord;
use crate::error::{CshockError, Result};
use crate::schema::FeatureSchema;
use crate::tensor::graph::softmax_weights;

/// Hourly model scores for one patient from admission to the observed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    pub patient_id: String,
    /// One score per hour 0..=observed_time, each in (0, 1).
    pub scores: Vec<f64>,
    pub observed_time: usize,
    /// True for cardiogenic/mixed shock.
    pub positive: bool,
}

impl RiskTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.observed_time + 1 {
            return Err(CshockError::Data(format!(
                "{}: {} scores for observed time {}",
                self.patient_id,
                self.scores.len(),
                self.observed_time
            )));
        }
        if self.scores.iter().any(|s| *s <= 0.0 || *s >= 1.0) {
            return Err(CshockError::Data(format!(
                "{}: scores must lie strictly inside (0, 1)",
                self.patient_id
            )));
        }
        Ok(())
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

/// Softmax(alpha * r)^T r. Lies in [min r, max r] and approaches max r as
/// alpha grows.
pub fn softmax_weighted_risk(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(CshockError::InvalidArgument(
            "softmax-weighted risk of an empty score list".into(),
        ));
    }
    if alpha <= 0.0 {
        return Err(CshockError::InvalidArgument(format!(
            "softmax temperature must be > 0, got {alpha}"
        )));
    }
    let w = softmax_weights(scores, alpha);
    Ok(w.iter().zip(scores).map(|(w, r)| w * r).sum())
}

/// Combined risk loss over a batch: sum over non-cardiogenic patients of the
/// softmax-weighted risk minus the same sum over cardiogenic/mixed patients.
/// With `mean_reduction` the total is divided by the batch size.
pub fn cshock_loss(
    trajectories: &[RiskTrajectory],
    alpha: f64,
    mean_reduction: bool,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(CshockError::InvalidArgument(
            "loss over an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for t in trajectories {
        let v = softmax_weighted_risk(&t.scores, alpha)?;
        total += if t.positive { -v } else { v };
    }
    if mean_reduction {
        total /= trajectories.len() as f64;
    }
    Ok(total)
}

/// Trajectory of a model on a masked input subset.
pub fn masked_trajectory(
    model: &RiskModel,
    schema: &FeatureSchema,
    record: &PreparedRecord,
    keep: &[bool],
) -> Result<Vec<f64>> {
    let masked = apply_mask(schema, &record.channels, keep)?;
    model.trajectory_scores(&masked, record.len)
}

/// The label-free value function: the softmax-weighted risk the surrogate
/// assigns to a record when only the subset `keep` is observed.
pub fn value_function(
    model: &RiskModel,
    schema: &FeatureSchema,
    record: &PreparedRecord,
    keep: &[bool],
) -> Result<f64> {
    let scores = masked_trajectory(model, schema, record, keep)?;
    softmax_weighted_risk(&scores, model.config.alpha)
}
