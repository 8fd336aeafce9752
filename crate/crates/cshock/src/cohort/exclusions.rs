//! Cohort inclusion/exclusion filters.

use serde::{Deserialize, Serialize};

use super::PatientRecord;

/// Hours inside which developed shock marks a peri-shock admission.
pub const EARLY_SHOCK_HOURS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    AgeOutOfRange,
    HospitalStayTooShort,
    ShockWithinFourHours,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub schema_version: u32,
    pub total: usize,
    pub retained: usize,
    /// Patients failing each criterion; a patient may count under several.
    pub excluded_age: usize,
    pub excluded_stay: usize,
    pub excluded_early_shock: usize,
    pub excluded: Vec<(String, Vec<ExclusionReason>)>,
}

fn reasons(record: &PatientRecord) -> Vec<ExclusionReason> {
    let mut out = Vec::new();
    if record.age < 18.0 || record.age > 89.0 {
        out.push(ExclusionReason::AgeOutOfRange);
    }
    if record.hospital_stay_hours < 24.0 {
        out.push(ExclusionReason::HospitalStayTooShort);
    }
    if let Some(onset) = record.onset_hour {
        if onset < EARLY_SHOCK_HOURS {
            out.push(ExclusionReason::ShockWithinFourHours);
        }
    }
    out
}

/// Drop records violating any criterion; the report counts per criterion.
pub fn apply_exclusions(records: Vec<PatientRecord>) -> (Vec<PatientRecord>, ExclusionReport) {
    let mut report = ExclusionReport {
        schema_version: 1,
        total: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(records.len());
    for record in records {
        let why = reasons(&record);
        if why.is_empty() {
            kept.push(record);
        } else {
            for r in &why {
                match r {
                    ExclusionReason::AgeOutOfRange => report.excluded_age += 1,
                    ExclusionReason::HospitalStayTooShort => report.excluded_stay += 1,
                    ExclusionReason::ShockWithinFourHours => report.excluded_early_shock += 1,
                }
            }
            report.excluded.push((record.patient_id.clone(), why));
        }
    }
    report.retained = kept.len();
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{EventLabel, Sex};

    fn record(id: &str, age: f64, stay: f64, onset: Option<usize>) -> PatientRecord {
        let (label, observed) = match onset {
            Some(h) => (EventLabel::CardiogenicOrMixed, h),
            None => (EventLabel::NoShock, 30),
        };
        PatientRecord {
            patient_id: id.into(),
            age,
            sex: Sex::Female,
            hospital_stay_hours: stay,
            event_label: label,
            observed_time: observed,
            onset_hour: onset,
            mortality: false,
            statics: vec![],
            series: vec![],
        }
    }

    #[test]
    fn early_shock_is_excluded() {
        let (kept, report) = apply_exclusions(vec![record("p1", 60.0, 72.0, Some(3))]);
        assert!(kept.is_empty());
        assert_eq!(report.excluded_early_shock, 1);
    }

    #[test]
    fn age_ninety_is_excluded_and_sixty_five_retained() {
        let (kept, report) = apply_exclusions(vec![
            record("p1", 90.0, 72.0, None),
            record("p2", 65.0, 72.0, Some(30)),
        ]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].patient_id, "p2");
        assert_eq!(report.excluded_age, 1);
        assert_eq!(report.retained, 1);
        assert_eq!(report.total, 2);
    }

    #[test]
    fn short_stay_is_excluded_and_onset_at_four_retained() {
        let (kept, report) = apply_exclusions(vec![
            record("p1", 60.0, 20.0, None),
            record("p2", 60.0, 48.0, Some(4)),
        ]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].patient_id, "p2");
        assert_eq!(report.excluded_stay, 1);
    }

    #[test]
    fn multiple_reasons_all_counted() {
        let (_, report) = apply_exclusions(vec![record("p1", 17.0, 10.0, Some(1))]);
        assert_eq!(report.excluded_age, 1);
        assert_eq!(report.excluded_stay, 1);
        assert_eq!(report.excluded_early_shock, 1);
        assert_eq!(report.excluded.len(), 1);
    }
}
