//! Ordered feature catalog governing preprocessing, model input layout,
//! and explainer masking.
//!
//! The model input stacks, in this order: one standardized value channel per
//! time-varying feature, one missingness-indicator channel per time-varying
//! feature (1 missing, 0 observed, -1 masked by the explainer), and one
//! constant channel per static feature.

use serde::{Deserialize, Serialize};

use crate::error::{CshockError, Result};
use crate::util::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    TimeVarying,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    pub unit: String,
    pub in_reduced_model: bool,
    pub maskable: bool,
}

/// Ordered feature list: all time-varying features first, then statics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub schema_version: u32,
    pub name: String,
    features: Vec<FeatureDef>,
    time_varying_count: usize,
    static_count: usize,
}

/// A maskable feature viewed as one Shapley player. Masking a time-varying
/// player zeroes its value channel and sets its indicator channel to -1;
/// masking a static player zeroes its channel (statics carry no indicator).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskablePlayer {
    pub name: String,
    pub kind: FeatureKind,
    /// Index within time-varying features or within statics, by kind.
    pub local_index: usize,
}

// Core clinical time-varying features with plausible units. Everything past
// this list is generic filler to reach the catalog sizes.
const NAMED_TIME_VARYING: &[(&str, &str)] = &[
    ("heart_rate", "bpm"),
    ("sbp_no_support", "mmHg"),
    ("dbp", "mmHg"),
    ("map_bp", "mmHg"),
    ("resp_rate", "breaths/min"),
    ("spo2", "%"),
    ("temp_c", "C"),
    ("gcs_total", "score"),
    ("gcs_eye", "score"),
    ("gcs_verbal", "score"),
    ("gcs_motor", "score"),
    ("braden_scale", "score"),
    ("urine_output_rate", "cc/kg/hr"),
    ("lactate", "mmol/L"),
    ("creatinine", "mg/dl"),
    ("bun", "mg/dl"),
    ("sodium", "mmol/L"),
    ("chloride", "mmol/L"),
    ("potassium", "mmol/L"),
    ("bicarbonate", "mmol/L"),
    ("ph_arterial", "pH"),
    ("pco2", "mmHg"),
    ("po2", "mmHg"),
    ("hemoglobin", "g/dl"),
    ("wbc", "10^9/L"),
    ("platelets", "10^9/L"),
    ("glucose", "mg/dl"),
    ("troponin", "ng/ml"),
    ("bnp", "pg/ml"),
    ("inr", "ratio"),
];

const STATIC_FEATURES: &[(&str, &str)] = &[
    ("age", "years"),
    ("sex_male", "0/1"),
    ("weight_kg", "kg"),
    ("height_cm", "cm"),
    ("dx_adhf", "0/1"),
    ("dx_stemi", "0/1"),
    ("dx_nstemi", "0/1"),
    ("prior_mi", "0/1"),
    ("prior_hf", "0/1"),
    ("diabetes", "0/1"),
    ("hypertension", "0/1"),
    ("baseline_creatinine", "mg/dl"),
];

const FULL_TIME_VARYING: usize = 182;
const REDUCED_TIME_VARYING: usize = 58;

impl FeatureSchema {
    /// Full feature catalog: 194 features, 182 time-varying + 12 static.
    /// The first 58 time-varying features plus all statics form the reduced
    /// catalog and are the maskable set.
    pub fn full() -> Self {
        let mut features = Vec::with_capacity(FULL_TIME_VARYING + STATIC_FEATURES.len());
        for i in 0..FULL_TIME_VARYING {
            let (name, unit) = if i < NAMED_TIME_VARYING.len() {
                let (n, u) = NAMED_TIME_VARYING[i];
                (n.to_string(), u.to_string())
            } else {
                (format!("lab_{:03}", i + 1), "arb".to_string())
            };
            let reduced = i < REDUCED_TIME_VARYING;
            features.push(FeatureDef {
                name,
                kind: FeatureKind::TimeVarying,
                unit,
                in_reduced_model: reduced,
                maskable: reduced,
            });
        }
        for (name, unit) in STATIC_FEATURES {
            features.push(FeatureDef {
                name: name.to_string(),
                kind: FeatureKind::Static,
                unit: unit.to_string(),
                in_reduced_model: true,
                maskable: true,
            });
        }
        Self {
            schema_version: 1,
            name: "full".to_string(),
            time_varying_count: FULL_TIME_VARYING,
            static_count: STATIC_FEATURES.len(),
            features,
        }
    }

    /// Reduced catalog: the 70-feature subset of the full catalog
    /// (58 time-varying + 12 static), all maskable.
    pub fn reduced() -> Self {
        let full = Self::full();
        let features: Vec<FeatureDef> = full
            .features
            .into_iter()
            .filter(|f| f.in_reduced_model)
            .collect();
        let tv = features
            .iter()
            .filter(|f| f.kind == FeatureKind::TimeVarying)
            .count();
        let st = features.len() - tv;
        Self {
            schema_version: 1,
            name: "reduced".to_string(),
            time_varying_count: tv,
            static_count: st,
            features,
        }
    }

    /// Small custom catalogs for experiments and tests.
    pub fn custom(
        name: &str,
        time_varying: &[(&str, &str)],
        statics: &[(&str, &str)],
        maskable: bool,
    ) -> Self {
        let mut features = Vec::with_capacity(time_varying.len() + statics.len());
        for (n, u) in time_varying {
            features.push(FeatureDef {
                name: n.to_string(),
                kind: FeatureKind::TimeVarying,
                unit: u.to_string(),
                in_reduced_model: true,
                maskable,
            });
        }
        for (n, u) in statics {
            features.push(FeatureDef {
                name: n.to_string(),
                kind: FeatureKind::Static,
                unit: u.to_string(),
                in_reduced_model: true,
                maskable,
            });
        }
        Self {
            schema_version: 1,
            name: name.to_string(),
            time_varying_count: time_varying.len(),
            static_count: statics.len(),
            features,
        }
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn time_varying(&self) -> &[FeatureDef] {
        &self.features[..self.time_varying_count]
    }

    pub fn statics(&self) -> &[FeatureDef] {
        &self.features[self.time_varying_count..]
    }

    pub fn time_varying_count(&self) -> usize {
        self.time_varying_count
    }

    pub fn static_count(&self) -> usize {
        self.static_count
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    /// Model input channel count: 2 per time-varying feature plus statics.
    pub fn input_channels(&self) -> usize {
        2 * self.time_varying_count + self.static_count
    }

    pub fn value_row(&self, tv_index: usize) -> usize {
        tv_index
    }

    pub fn indicator_row(&self, tv_index: usize) -> usize {
        self.time_varying_count + tv_index
    }

    pub fn static_row(&self, static_index: usize) -> usize {
        2 * self.time_varying_count + static_index
    }

    pub fn tv_index(&self, name: &str) -> Option<usize> {
        self.time_varying().iter().position(|f| f.name == name)
    }

    pub fn static_index(&self, name: &str) -> Option<usize> {
        self.statics().iter().position(|f| f.name == name)
    }

    /// The ordered Shapley players: maskable features, time-varying first.
    pub fn maskable_players(&self) -> Vec<MaskablePlayer> {
        let mut out = Vec::new();
        for (i, f) in self.time_varying().iter().enumerate() {
            if f.maskable {
                out.push(MaskablePlayer {
                    name: f.name.clone(),
                    kind: FeatureKind::TimeVarying,
                    local_index: i,
                });
            }
        }
        for (i, f) in self.statics().iter().enumerate() {
            if f.maskable {
                out.push(MaskablePlayer {
                    name: f.name.clone(),
                    kind: FeatureKind::Static,
                    local_index: i,
                });
            }
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let tv = self
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::TimeVarying)
            .count();
        let st = self.features.len() - tv;
        if tv != self.time_varying_count || st != self.static_count {
            return Err(CshockError::Data(format!(
                "schema counts disagree with feature list: {} tv / {} static recorded, {} / {} found",
                self.time_varying_count, self.static_count, tv, st
            )));
        }
        if self.features[..tv]
            .iter()
            .any(|f| f.kind != FeatureKind::TimeVarying)
        {
            return Err(CshockError::Data(
                "time-varying features must precede statics".into(),
            ));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.features.len() {
            return Err(CshockError::Data("duplicate feature names".into()));
        }
        Ok(())
    }
}
