//! Rule-based shock-onset adjudication over raw measurement streams.
//!
//! Onset is the earliest time at which either
//!   (a) systolic blood pressure has been below 90 mmHg for at least 30
//!       minutes AND at least one hypoperfusion criterion holds at the same
//!       time (urine output < 0.5 cc/kg/hr for >= 6 h, creatinine risen
//!       1.5-fold or by 0.3 mg/dl from baseline, or lactate > 2 mmol/L), or
//!   (b) pharmacologic or mechanical circulatory support is initiated to
//!       maintain systolic blood pressure above 90 mmHg.
//!
//! Measurements persist until the next reading (step semantics), the
//! hypoperfusion evidence must overlap the completed hypotension window in
//! time, and the qualifying instant is rounded down to its containing hour.

use serde::{Deserialize, Serialize};

use super::{ChartEtiology, EventLabel, RawStream};
use crate::error::{CshockError, Result};

const SBP_THRESHOLD: f64 = 90.0;
const WINDOW_HOURS: f64 = 0.5;
const URINE_THRESHOLD: f64 = 0.5;
const URINE_HOURS: f64 = 6.0;
const CREATININE_FOLD: f64 = 1.5;
const CREATININE_RISE: f64 = 0.3;
const LACTATE_UPPER_NORMAL: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggeringRule {
    HypotensionPlusHypoperfusion,
    SupportInitiation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    HypotensionWindow,
    UrineOutput,
    CreatinineRise,
    LactateElevated,
    SupportInitiation,
    BaselineFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub criterion: Criterion,
    /// First hour (fractional) at which the sub-criterion was satisfied.
    pub hour: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationResult {
    pub patient_id: String,
    pub label: EventLabel,
    pub onset_hour: Option<usize>,
    pub triggering_rule: Option<TriggeringRule>,
    pub audit: Vec<AuditEntry>,
}

/// Half-open intervals [start, end) during which a step-function predicate
/// holds, given (time, value) samples that persist until the next sample.
fn step_intervals(
    samples: &[(f64, f64)],
    end_hour: f64,
    pred: impl Fn(f64) -> bool,
) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<f64> = None;
    for (i, &(t, v)) in samples.iter().enumerate() {
        if pred(v) {
            if open.is_none() {
                open = Some(t);
            }
            if i + 1 == samples.len() {
                out.push((open.take().expect("opened"), end_hour.max(t)));
            }
        } else if let Some(start) = open.take() {
            out.push((start, t));
        }
    }
    out
}

/// Earliest overlap instant between two interval families, each sorted.
fn earliest_overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo <= hi {
                best = Some(best.map_or(lo, |x: f64| x.min(lo)));
            }
        }
    }
    best
}

pub fn adjudicate(stream: &RawStream) -> Result<AdjudicationResult> {
    if stream.is_empty() {
        return Err(CshockError::Data(format!(
            "{}: empty stream",
            stream.patient_id
        )));
    }
    stream.validate()?;
    let end = stream.end_hour;
    let mut audit: Vec<AuditEntry> = Vec::new();

    // (a) completed >= 30-minute hypotension windows. The criterion holds
    // from window_start + 30 min until the run ends.
    let hypo_runs = step_intervals(&stream.sbp, end, |v| v < SBP_THRESHOLD);
    let mut hypo_active: Vec<(f64, f64)> = Vec::new();
    for (s, e) in hypo_runs {
        if e - s >= WINDOW_HOURS {
            hypo_active.push((s + WINDOW_HOURS, e));
        }
    }
    if let Some(&(t, _)) = hypo_active.first() {
        audit.push(AuditEntry {
            criterion: Criterion::HypotensionWindow,
            hour: t,
            detail: format!("SBP < {SBP_THRESHOLD} mmHg sustained 30 min"),
        });
    }

    // Hypoperfusion evidence, each as active intervals.
    let mut hypoperfusion: Vec<(f64, f64)> = Vec::new();

    let urine_runs = step_intervals(&stream.urine_rate, end, |v| v < URINE_THRESHOLD);
    let mut urine_active: Vec<(f64, f64)> = Vec::new();
    for (s, e) in urine_runs {
        if e - s >= URINE_HOURS {
            urine_active.push((s + URINE_HOURS, e));
        }
    }
    if let Some(&(t, _)) = urine_active.first() {
        audit.push(AuditEntry {
            criterion: Criterion::UrineOutput,
            hour: t,
            detail: format!("urine output < {URINE_THRESHOLD} cc/kg/hr for >= {URINE_HOURS} h"),
        });
    }
    hypoperfusion.extend(&urine_active);

    // Creatinine rise relative to baseline. Without a recorded baseline the
    // first observed value stands in and only the absolute 0.3 mg/dl rise
    // applies.
    let creat_active = match stream.creatinine_baseline {
        Some(baseline) => step_intervals(&stream.creatinine, end, |v| {
            v >= CREATININE_FOLD * baseline || v >= baseline + CREATININE_RISE
        }),
        None => {
            if let Some(&(_, first)) = stream.creatinine.first() {
                audit.push(AuditEntry {
                    criterion: Criterion::BaselineFallback,
                    hour: stream.creatinine[0].0,
                    detail: format!(
                        "no creatinine baseline; using first observed value {first} with the 0.3 mg/dl rise rule"
                    ),
                });
                step_intervals(&stream.creatinine, end, |v| v >= first + CREATININE_RISE)
            } else {
                Vec::new()
            }
        }
    };
    if let Some(&(t, _)) = creat_active.first() {
        audit.push(AuditEntry {
            criterion: Criterion::CreatinineRise,
            hour: t,
            detail: "serum creatinine risen 1.5-fold or 0.3 mg/dl from baseline".into(),
        });
    }
    hypoperfusion.extend(&creat_active);

    let lactate_active = step_intervals(&stream.lactate, end, |v| v > LACTATE_UPPER_NORMAL);
    if let Some(&(t, _)) = lactate_active.first() {
        audit.push(AuditEntry {
            criterion: Criterion::LactateElevated,
            hour: t,
            detail: format!("serum lactate > {LACTATE_UPPER_NORMAL} mmol/L"),
        });
    }
    hypoperfusion.extend(&lactate_active);

    let qualify_a = earliest_overlap(&hypo_active, &hypoperfusion);

    // (b) qualifying support initiation.
    let qualify_b = stream
        .support_events
        .iter()
        .filter(|ev| ev.for_blood_pressure)
        .map(|ev| ev.hour)
        .fold(None, |acc: Option<f64>, h| {
            Some(acc.map_or(h, |a| a.min(h)))
        });
    if let Some(t) = qualify_b {
        audit.push(AuditEntry {
            criterion: Criterion::SupportInitiation,
            hour: t,
            detail: "support initiated to maintain SBP above 90 mmHg".into(),
        });
    }

    let (qualify, rule) = match (qualify_a, qualify_b) {
        (Some(a), Some(b)) if b <= a => (Some(b), Some(TriggeringRule::SupportInitiation)),
        (Some(a), _) => (Some(a), Some(TriggeringRule::HypotensionPlusHypoperfusion)),
        (None, Some(b)) => (Some(b), Some(TriggeringRule::SupportInitiation)),
        (None, None) => (None, None),
    };

    let (label, onset_hour) = match qualify {
        None => (EventLabel::NoShock, None),
        Some(q) => {
            let label = match stream.chart_etiology {
                ChartEtiology::Noncardiogenic => EventLabel::NoncardiogenicOnly,
                // Unreviewed etiology defaults to the alarm-relevant class.
                _ => EventLabel::CardiogenicOrMixed,
            };
            (label, Some(q.max(0.0).floor() as usize))
        }
    };

    Ok(AdjudicationResult {
        patient_id: stream.patient_id.clone(),
        label,
        onset_hour,
        triggering_rule: rule,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{SupportEvent, SupportKind};

    pub(crate) fn empty_stream(id: &str, end: f64) -> RawStream {
        RawStream {
            patient_id: id.into(),
            sbp: Vec::new(),
            heart_rate: Vec::new(),
            lactate: Vec::new(),
            creatinine: Vec::new(),
            creatinine_baseline: None,
            urine_rate: Vec::new(),
            support_events: Vec::new(),
            chart_etiology: ChartEtiology::None,
            end_hour: end,
        }
    }

    fn normal_sbp_until(end: f64) -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        let mut t = 0.0;
        while t < end {
            v.push((t, 115.0));
            t += 0.25;
        }
        v
    }

    #[test]
    fn hypotension_plus_lactate_fires_at_window_completion() {
        // SBP 85 from 10.0 to 10.75, lactate 2.5 at hour 10: the 30-min
        // window completes at 10.5, simultaneous with elevated lactate,
        // so onset is hour 10.
        let mut s = empty_stream("p1", 48.0);
        s.sbp = normal_sbp_until(10.0);
        for k in 0..4 {
            s.sbp.push((10.0 + 0.25 * k as f64, 85.0));
        }
        s.sbp.push((11.0, 110.0));
        s.lactate = vec![(10.0, 2.5)];
        s.chart_etiology = ChartEtiology::Cardiogenic;
        let r = adjudicate(&s).unwrap();
        assert_eq!(r.label, EventLabel::CardiogenicOrMixed);
        assert_eq!(r.onset_hour, Some(10));
        assert_eq!(
            r.triggering_rule,
            Some(TriggeringRule::HypotensionPlusHypoperfusion)
        );
    }

    #[test]
    fn support_initiation_fires_without_hypotension_window() {
        let mut s = empty_stream("p2", 40.0);
        s.sbp = normal_sbp_until(40.0);
        s.support_events.push(SupportEvent {
            hour: 20.0,
            kind: SupportKind::Pharmacologic,
            for_blood_pressure: true,
        });
        s.chart_etiology = ChartEtiology::Cardiogenic;
        let r = adjudicate(&s).unwrap();
        assert_eq!(r.onset_hour, Some(20));
        assert_eq!(r.triggering_rule, Some(TriggeringRule::SupportInitiation));
    }

    #[test]
    fn short_dip_without_hypoperfusion_is_no_shock() {
        // SBP 85 for 20 minutes only, no hypoperfusion evidence.
        let mut s = empty_stream("p3", 30.0);
        s.sbp = vec![(9.75, 115.0), (10.0, 85.0), (10.33, 115.0), (11.0, 116.0)];
        let r = adjudicate(&s).unwrap();
        assert_eq!(r.label, EventLabel::NoShock);
        assert_eq!(r.onset_hour, None);
        assert!(r.triggering_rule.is_none());
    }

    #[test]
    fn empty_stream_is_rejected() {
        let s = empty_stream("p4", 10.0);
        assert!(adjudicate(&s).is_err());
    }

    #[test]
    fn onset_uses_earliest_qualifying_episode() {
        let mut s = empty_stream("p5", 60.0);
        // Two qualifying episodes; the first must win.
        s.sbp = vec![
            (0.0, 120.0),
            (8.0, 85.0),
            (9.0, 120.0),
            (30.0, 82.0),
            (31.0, 120.0),
        ];
        s.lactate = vec![(1.0, 3.0)];
        s.chart_etiology = ChartEtiology::Mixed;
        let r = adjudicate(&s).unwrap();
        assert_eq!(r.onset_hour, Some(8));
    }

    #[test]
    fn adding_hypoperfusion_evidence_never_delays_onset() {
        let mut base = empty_stream("p6", 40.0);
        base.sbp = vec![(0.0, 120.0), (12.0, 84.0), (14.0, 120.0)];
        base.lactate = vec![(13.0, 2.5)];
        base.chart_etiology = ChartEtiology::Cardiogenic;
        let first = adjudicate(&base).unwrap();
        let mut more = base.clone();
        more.creatinine_baseline = Some(1.0);
        more.creatinine = vec![(5.0, 1.6)];
        let second = adjudicate(&more).unwrap();
        assert!(second.onset_hour.unwrap() <= first.onset_hour.unwrap());
    }
}
