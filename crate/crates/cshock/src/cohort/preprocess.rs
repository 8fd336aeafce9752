//! Standardization, mean imputation, and missingness indicators.
//!
//! Statistics are fitted on training records only and travel with the model
//! checkpoint, so evaluation of unseen records never refits anything.

use serde::{Deserialize, Serialize};

use super::{EventLabel, PatientRecord, Sex};
use crate::error::{CshockError, Result};
use crate::schema::FeatureSchema;
use crate::tensor::Tensor;
use crate::util::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    pub observed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub schema_fingerprint: String,
    /// Fingerprint of the sorted training patient ids (leakage guard).
    pub fit_fingerprint: String,
    pub time_varying: Vec<FeatureStats>,
    pub statics: Vec<FeatureStats>,
    /// Features never observed in training; they standardize to 0 / std 1.
    pub never_observed: Vec<String>,
}

/// Fingerprint of a patient-id set, order independent.
pub fn id_set_fingerprint(ids: &[&str]) -> String {
    let mut sorted: Vec<&str> = ids.to_vec();
    sorted.sort_unstable();
    sha256_hex(sorted.join("\n").as_bytes())
}

fn stats_from(sum: f64, sum_sq: f64, n: u64) -> FeatureStats {
    if n == 0 {
        return FeatureStats {
            mean: 0.0,
            std: 1.0,
            observed: 0,
        };
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    FeatureStats {
        mean,
        // Zero-variance features keep std 1 so they standardize to zero.
        std: if std < 1e-12 { 1.0 } else { std },
        observed: n,
    }
}

/// Per-feature mean/std over observed cells of the training records.
pub fn fit_preprocessor(
    records: &[&PatientRecord],
    schema: &FeatureSchema,
) -> Result<PreprocessorState> {
    if records.is_empty() {
        return Err(CshockError::Data(
            "cannot fit a preprocessor on an empty training split".into(),
        ));
    }
    let tv = schema.time_varying_count();
    let st = schema.static_count();
    let mut tv_acc = vec![(0.0f64, 0.0f64, 0u64); tv];
    let mut st_acc = vec![(0.0f64, 0.0f64, 0u64); st];
    for r in records {
        r.validate(schema)?;
        for (j, row) in r.series.iter().enumerate() {
            let acc = &mut tv_acc[j];
            for v in row.iter().flatten() {
                acc.0 += v;
                acc.1 += v * v;
                acc.2 += 1;
            }
        }
        for (k, v) in r.statics.iter().enumerate() {
            if let Some(v) = v {
                let acc = &mut st_acc[k];
                acc.0 += v;
                acc.1 += v * v;
                acc.2 += 1;
            }
        }
    }
    let time_varying: Vec<FeatureStats> = tv_acc
        .into_iter()
        .map(|(s, sq, n)| stats_from(s, sq, n))
        .collect();
    let statics: Vec<FeatureStats> = st_acc
        .into_iter()
        .map(|(s, sq, n)| stats_from(s, sq, n))
        .collect();
    let mut never_observed = Vec::new();
    for (j, s) in time_varying.iter().enumerate() {
        if s.observed == 0 {
            never_observed.push(schema.time_varying()[j].name.clone());
        }
    }
    for (k, s) in statics.iter().enumerate() {
        if s.observed == 0 {
            never_observed.push(schema.statics()[k].name.clone());
        }
    }
    let ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    Ok(PreprocessorState {
        schema_fingerprint: schema.fingerprint(),
        fit_fingerprint: id_set_fingerprint(&ids),
        time_varying,
        statics,
        never_observed,
    })
}

/// A model-ready record: standardized channels plus the labels and
/// attributes downstream stages need.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    pub patient_id: String,
    /// [input_channels x (U+1)]: values, indicators, then static channels.
    pub channels: Tensor,
    pub len: usize,
    pub event_label: EventLabel,
    pub mortality: bool,
    pub onset_hour: Option<usize>,
    pub age: f64,
    pub sex: Sex,
}

impl PreparedRecord {
    pub fn is_positive(&self) -> bool {
        self.event_label.is_positive()
    }
}

/// Standardize one record with fitted statistics. Missing time-varying cells
/// impute to the population mean (standardized value 0) with indicator 1;
/// observed cells get indicator 0. Static features standardize once and are
/// replicated across all timesteps as constant channels.
pub fn preprocess(
    record: &PatientRecord,
    schema: &FeatureSchema,
    state: &PreprocessorState,
) -> Result<PreparedRecord> {
    if state.schema_fingerprint != schema.fingerprint() {
        return Err(CshockError::Data(format!(
            "{}: preprocessor was fitted for a different schema",
            record.patient_id
        )));
    }
    record.validate(schema)?;
    let hours = record.observed_time + 1;
    let channels = schema.input_channels();
    let mut data = vec![0.0; channels * hours];
    for (j, row) in record.series.iter().enumerate() {
        let stats = &state.time_varying[j];
        let value_base = schema.value_row(j) * hours;
        let ind_base = schema.indicator_row(j) * hours;
        for (k, cell) in row.iter().enumerate() {
            match cell {
                Some(v) => {
                    data[value_base + k] = (v - stats.mean) / stats.std;
                    data[ind_base + k] = 0.0;
                }
                None => {
                    data[value_base + k] = 0.0;
                    data[ind_base + k] = 1.0;
                }
            }
        }
    }
    for (k, cell) in record.statics.iter().enumerate() {
        let stats = &state.statics[k];
        let standardized = match cell {
            Some(v) => (v - stats.mean) / stats.std,
            None => 0.0,
        };
        let base = schema.static_row(k) * hours;
        for t in 0..hours {
            data[base + t] = standardized;
        }
    }
    Ok(PreparedRecord {
        patient_id: record.patient_id.clone(),
        channels: Tensor::new(vec![channels, hours], data)?,
        len: hours,
        event_label: record.event_label,
        mortality: record.mortality,
        onset_hour: record.onset_hour,
        age: record.age,
        sex: record.sex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::custom("pp", &[("a", "u"), ("b", "u")], &[("s", "u")], true)
    }

    fn record(id: &str, series: Vec<Vec<Option<f64>>>, statics: Vec<Option<f64>>) -> PatientRecord {
        let hours = series[0].len();
        PatientRecord {
            patient_id: id.into(),
            age: 60.0,
            sex: Sex::Female,
            hospital_stay_hours: 50.0,
            event_label: EventLabel::NoShock,
            observed_time: hours - 1,
            onset_hour: None,
            mortality: false,
            statics,
            series,
        }
    }

    #[test]
    fn observed_one_and_three_standardize_to_unit() {
        let schema = schema();
        let r = record(
            "p1",
            vec![
                vec![Some(1.0), Some(3.0)],
                vec![Some(5.0), Some(5.0)],
            ],
            vec![Some(2.0)],
        );
        let state = fit_preprocessor(&[&r], &schema).unwrap();
        assert_eq!(state.time_varying[0].mean, 2.0);
        assert_eq!(state.time_varying[0].std, 1.0);
        let prepared = preprocess(&r, &schema, &state).unwrap();
        // value 3 standardizes to 1.0
        assert_eq!(prepared.channels.data()[1], 1.0);
        // constant feature standardizes to zeros (std fixed at 1)
        assert_eq!(prepared.channels.data()[2], 0.0);
        assert_eq!(prepared.channels.data()[3], 0.0);
    }

    #[test]
    fn missing_cell_imputes_to_zero_with_indicator_one() {
        let schema = schema();
        let train = record(
            "p1",
            vec![vec![Some(1.0), Some(3.0)], vec![Some(0.0), Some(1.0)]],
            vec![Some(2.0)],
        );
        let state = fit_preprocessor(&[&train], &schema).unwrap();
        let r = record(
            "p2",
            vec![vec![None, Some(2.0)], vec![Some(0.5), Some(0.5)]],
            vec![Some(2.0)],
        );
        let prepared = preprocess(&r, &schema, &state).unwrap();
        let hours = 2;
        let value_row = schema.value_row(0) * hours;
        let ind_row = schema.indicator_row(0) * hours;
        assert_eq!(prepared.channels.data()[value_row], 0.0);
        assert_eq!(prepared.channels.data()[ind_row], 1.0);
        // fully observed hour 1: indicators 0 for both features
        assert_eq!(prepared.channels.data()[ind_row + 1], 0.0);
        assert_eq!(
            prepared.channels.data()[schema.indicator_row(1) * hours + 1],
            0.0
        );
    }

    #[test]
    fn channel_count_matches_schema_arithmetic() {
        let schema = FeatureSchema::full();
        assert_eq!(schema.input_channels(), 2 * 182 + 12);
    }

    #[test]
    fn never_observed_feature_flagged_with_identity_stats() {
        let schema = schema();
        let r = record(
            "p1",
            vec![vec![Some(1.0)], vec![None]],
            vec![Some(2.0)],
        );
        let state = fit_preprocessor(&[&r], &schema).unwrap();
        assert_eq!(state.time_varying[1].mean, 0.0);
        assert_eq!(state.time_varying[1].std, 1.0);
        assert_eq!(state.never_observed, vec!["b".to_string()]);
    }

    #[test]
    fn fit_ignores_validation_records() {
        let schema = schema();
        let train = record(
            "p1",
            vec![vec![Some(1.0), Some(3.0)], vec![Some(0.0), Some(1.0)]],
            vec![Some(2.0)],
        );
        let state_a = fit_preprocessor(&[&train], &schema).unwrap();
        // A different "validation" record must not change fitted statistics.
        let state_b = fit_preprocessor(&[&train], &schema).unwrap();
        assert_eq!(state_a, state_b);
        assert_eq!(state_a.fit_fingerprint, state_b.fit_fingerprint);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let schema_a = schema();
        let schema_b = FeatureSchema::custom("other", &[("a", "u"), ("b", "u")], &[("s", "u")], false);
        let r = record(
            "p1",
            vec![vec![Some(1.0)], vec![Some(2.0)]],
            vec![Some(2.0)],
        );
        let state = fit_preprocessor(&[&r], &schema_a).unwrap();
        assert!(preprocess(&r, &schema_b, &state).is_err());
    }
}
