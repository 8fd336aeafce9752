//! Cohort domain types, synthetic generation, shock-onset adjudication,
//! inclusion/exclusion filters, and the preprocessing contract.

pub mod adjudicate;
pub mod exclusions;
pub mod generate;
pub mod preprocess;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CshockError, Result};
use crate::schema::FeatureSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventLabel {
    NoShock,
    NoncardiogenicOnly,
    CardiogenicOrMixed,
}

impl EventLabel {
    /// Positive cases for the risk model are cardiogenic or mixed shock;
    /// noncardiogenic-only patients count as negatives.
    pub fn is_positive(self) -> bool {
        matches!(self, EventLabel::CardiogenicOrMixed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

/// One ICU stay ready for modeling: static features, hourly time-varying
/// matrix with per-cell missingness, the event label, and the observed time
/// U (onset hour for cardiogenic/mixed shock, discharge hour otherwise).
/// The series holds raw units; standardization happens in preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: f64,
    pub sex: Sex,
    pub hospital_stay_hours: f64,
    pub event_label: EventLabel,
    /// U: the trajectory covers hours 0..=U (U+1 columns).
    pub observed_time: usize,
    /// Adjudicated shock onset hour, for any shock etiology.
    pub onset_hour: Option<usize>,
    /// In-hospital death, used by the pretraining task.
    pub mortality: bool,
    /// Raw static feature values; None = missing.
    pub statics: Vec<Option<f64>>,
    /// Raw hourly values per time-varying feature; None = missing.
    pub series: Vec<Vec<Option<f64>>>,
}

impl PatientRecord {
    pub fn is_positive(&self) -> bool {
        self.event_label.is_positive()
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.statics.len() != schema.static_count() {
            return Err(CshockError::Data(format!(
                "{}: {} static values for schema with {}",
                self.patient_id,
                self.statics.len(),
                schema.static_count()
            )));
        }
        if self.series.len() != schema.time_varying_count() {
            return Err(CshockError::Data(format!(
                "{}: {} time-varying rows for schema with {}",
                self.patient_id,
                self.series.len(),
                schema.time_varying_count()
            )));
        }
        let hours = self.observed_time + 1;
        for (i, row) in self.series.iter().enumerate() {
            if row.len() != hours {
                return Err(CshockError::Data(format!(
                    "{}: feature row {} has {} hours, expected {}",
                    self.patient_id,
                    i,
                    row.len(),
                    hours
                )));
            }
        }
        if self.event_label != EventLabel::NoShock && self.onset_hour.is_none() {
            return Err(CshockError::Data(format!(
                "{}: shock label without onset hour",
                self.patient_id
            )));
        }
        if self.event_label == EventLabel::NoShock && self.onset_hour.is_some() {
            return Err(CshockError::Data(format!(
                "{}: onset hour without shock label",
                self.patient_id
            )));
        }
        if self.is_positive() && self.onset_hour != Some(self.observed_time) {
            return Err(CshockError::Data(format!(
                "{}: positive trajectory must end at the onset hour",
                self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Pharmacologic,
    MechanicalCirculatory,
}

/// Timestamped initiation of hemodynamic support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEvent {
    pub hour: f64,
    pub kind: SupportKind,
    /// True when the agent/device was started to maintain systolic blood
    /// pressure above 90 mmHg; only such events qualify for onset.
    pub for_blood_pressure: bool,
}

/// Chart-review stand-in: shock etiology cannot be derived from structured
/// data alone, so the stream carries the reviewed etiology alongside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartEtiology {
    None,
    Cardiogenic,
    Mixed,
    Noncardiogenic,
}

/// Sub-hourly raw measurements needed by the onset rules. Timestamps are
/// hours from ICU admission, strictly increasing per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawStream {
    pub patient_id: String,
    /// Systolic blood pressure without support, sampled sub-hourly (mmHg).
    pub sbp: Vec<(f64, f64)>,
    pub heart_rate: Vec<(f64, f64)>,
    pub lactate: Vec<(f64, f64)>,
    pub creatinine: Vec<(f64, f64)>,
    pub creatinine_baseline: Option<f64>,
    /// Hourly urine output rate (cc/kg/hr).
    pub urine_rate: Vec<(f64, f64)>,
    pub support_events: Vec<SupportEvent>,
    pub chart_etiology: ChartEtiology,
    /// End of stream coverage, hours from admission.
    pub end_hour: f64,
}

impl RawStream {
    pub fn is_empty(&self) -> bool {
        self.sbp.is_empty()
            && self.heart_rate.is_empty()
            && self.lactate.is_empty()
            && self.creatinine.is_empty()
            && self.urine_rate.is_empty()
            && self.support_events.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, channel) in [
            ("sbp", &self.sbp),
            ("heart_rate", &self.heart_rate),
            ("lactate", &self.lactate),
            ("creatinine", &self.creatinine),
            ("urine_rate", &self.urine_rate),
        ] {
            let mut prev = f64::NEG_INFINITY;
            for &(t, _) in channel {
                if t < 0.0 {
                    return Err(CshockError::Data(format!(
                        "{}: negative timestamp in {}",
                        self.patient_id, name
                    )));
                }
                if t <= prev {
                    return Err(CshockError::Data(format!(
                        "{}: timestamps in {} must be strictly increasing",
                        self.patient_id, name
                    )));
                }
                prev = t;
            }
        }
        Ok(())
    }
}

/// Write one record per line (JSONL).
pub fn write_cohort_jsonl(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Read a JSONL cohort, reporting the offending line on parse errors.
pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| {
            CshockError::Data(format!("{}: line {}: {}", path.display(), i + 1, e))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Raw streams as CSV rows (patient_id, timestamp, channel, value, note).
/// Support events and the chart-etiology stand-in ride along in the same
/// file using the note column.
pub fn write_streams_csv(path: &Path, streams: &[RawStream]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "patient_id,timestamp,channel,value,note")?;
    for s in streams {
        if let Some(b) = s.creatinine_baseline {
            writeln!(file, "{},0,creatinine_baseline,{},", s.patient_id, b)?;
        }
        for (name, channel) in [
            ("sbp", &s.sbp),
            ("heart_rate", &s.heart_rate),
            ("lactate", &s.lactate),
            ("creatinine", &s.creatinine),
            ("urine_rate", &s.urine_rate),
        ] {
            for &(t, v) in channel {
                writeln!(file, "{},{},{},{},", s.patient_id, t, name, v)?;
            }
        }
        for ev in &s.support_events {
            let kind = match ev.kind {
                SupportKind::Pharmacologic => "pharmacologic",
                SupportKind::MechanicalCirculatory => "mechanical",
            };
            let bp = if ev.for_blood_pressure { "bp" } else { "other" };
            writeln!(
                file,
                "{},{},support_initiation,1,{}_{}",
                s.patient_id, ev.hour, kind, bp
            )?;
        }
        let et = match s.chart_etiology {
            ChartEtiology::None => "none",
            ChartEtiology::Cardiogenic => "cardiogenic",
            ChartEtiology::Mixed => "mixed",
            ChartEtiology::Noncardiogenic => "noncardiogenic",
        };
        writeln!(file, "{},{},chart_etiology,0,{}", s.patient_id, s.end_hour, et)?;
    }
    file.flush()?;
    Ok(())
}

/// Inverse of [`write_streams_csv`]; patients appear in first-seen order.
pub fn read_streams_csv(path: &Path) -> Result<Vec<RawStream>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, RawStream> = std::collections::HashMap::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(5, ',').collect();
        if parts.len() < 5 {
            return Err(CshockError::Data(format!(
                "{}: line {}: expected 5 columns",
                path.display(),
                i + 1
            )));
        }
        let bad = |what: &str| {
            CshockError::Data(format!("{}: line {}: bad {}", path.display(), i + 1, what))
        };
        let id = parts[0].to_string();
        let t: f64 = parts[1].parse().map_err(|_| bad("timestamp"))?;
        let channel = parts[2];
        let v: f64 = parts[3].parse().map_err(|_| bad("value"))?;
        let note = parts[4];
        if !by_id.contains_key(&id) {
            order.push(id.clone());
            by_id.insert(
                id.clone(),
                RawStream {
                    patient_id: id.clone(),
                    sbp: Vec::new(),
                    heart_rate: Vec::new(),
                    lactate: Vec::new(),
                    creatinine: Vec::new(),
                    creatinine_baseline: None,
                    urine_rate: Vec::new(),
                    support_events: Vec::new(),
                    chart_etiology: ChartEtiology::None,
                    end_hour: 0.0,
                },
            );
        }
        let s = by_id.get_mut(&id).expect("inserted above");
        s.end_hour = s.end_hour.max(t);
        match channel {
            "sbp" => s.sbp.push((t, v)),
            "heart_rate" => s.heart_rate.push((t, v)),
            "lactate" => s.lactate.push((t, v)),
            "creatinine" => s.creatinine.push((t, v)),
            "urine_rate" => s.urine_rate.push((t, v)),
            "creatinine_baseline" => s.creatinine_baseline = Some(v),
            "support_initiation" => {
                let (kind, bp) = match note {
                    "pharmacologic_bp" => (SupportKind::Pharmacologic, true),
                    "pharmacologic_other" => (SupportKind::Pharmacologic, false),
                    "mechanical_bp" => (SupportKind::MechanicalCirculatory, true),
                    "mechanical_other" => (SupportKind::MechanicalCirculatory, false),
                    _ => return Err(bad("support note")),
                };
                s.support_events.push(SupportEvent {
                    hour: t,
                    kind,
                    for_blood_pressure: bp,
                });
            }
            "chart_etiology" => {
                s.chart_etiology = match note {
                    "none" => ChartEtiology::None,
                    "cardiogenic" => ChartEtiology::Cardiogenic,
                    "mixed" => ChartEtiology::Mixed,
                    "noncardiogenic" => ChartEtiology::Noncardiogenic,
                    _ => return Err(bad("etiology note")),
                };
            }
            _ => return Err(bad("channel")),
        }
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("present"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_record() -> PatientRecord {
        PatientRecord {
            patient_id: "p1".into(),
            age: 60.0,
            sex: Sex::Male,
            hospital_stay_hours: 48.0,
            event_label: EventLabel::NoShock,
            observed_time: 1,
            onset_hour: None,
            mortality: false,
            statics: vec![Some(60.0)],
            series: vec![vec![Some(1.0), None], vec![None, Some(2.5)]],
        }
    }

    #[test]
    fn record_validation_checks_lengths_and_labels() {
        let schema = FeatureSchema::custom("t", &[("a", "u"), ("b", "u")], &[("s", "u")], true);
        let mut r = tiny_record();
        r.validate(&schema).unwrap();
        r.onset_hour = Some(1);
        assert!(r.validate(&schema).is_err());
        r.onset_hour = None;
        r.series[0].push(Some(0.0));
        assert!(r.validate(&schema).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let records = vec![tiny_record()];
        write_cohort_jsonl(&path, &records).unwrap();
        let back = read_cohort_jsonl(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn streams_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("streams.csv");
        let stream = RawStream {
            patient_id: "p1".into(),
            sbp: vec![(0.25, 112.0), (0.5, 88.5)],
            heart_rate: vec![(1.0, 90.0)],
            lactate: vec![(2.0, 2.4)],
            creatinine: vec![(3.0, 1.1)],
            creatinine_baseline: Some(0.9),
            urine_rate: vec![(1.0, 0.8)],
            support_events: vec![SupportEvent {
                hour: 5.5,
                kind: SupportKind::Pharmacologic,
                for_blood_pressure: true,
            }],
            chart_etiology: ChartEtiology::Mixed,
            end_hour: 6.0,
        };
        write_streams_csv(&path, std::slice::from_ref(&stream)).unwrap();
        let back = read_streams_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], stream);
    }

    #[test]
    fn stream_validation_rejects_unordered_timestamps() {
        let mut s = RawStream {
            patient_id: "p1".into(),
            sbp: vec![(1.0, 100.0), (0.5, 90.0)],
            heart_rate: vec![],
            lactate: vec![],
            creatinine: vec![],
            creatinine_baseline: None,
            urine_rate: vec![],
            support_events: vec![],
            chart_etiology: ChartEtiology::None,
            end_hour: 2.0,
        };
        assert!(s.validate().is_err());
        s.sbp = vec![(0.5, 100.0), (1.0, 90.0)];
        s.validate().unwrap();
    }
}
