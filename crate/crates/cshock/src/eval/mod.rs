//! Threshold-free and thresholded alarm metrics: AUROC, ROC curves,
//! operating points, threshold-at-sensitivity, lead time, and subgroup
//! analysis. Pure functions over immutable score/label pairs.

use serde::{Deserialize, Serialize};

use crate::cohort::Sex;
use crate::error::{CshockError, Result};

/// Recall comparisons use a small slack so nominal targets like 0.67 accept
/// the intended 2/3 operating point.
pub const SENSITIVITY_TOLERANCE: f64 = 0.005;

/// Alarm rule: the alarm fires at the first hour whose score reaches the
/// threshold (>= by default; `strict` switches to >).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmPolicy {
    pub threshold: f64,
    pub strict: bool,
}

impl AlarmPolicy {
    pub fn at(threshold: f64) -> Self {
        Self {
            threshold,
            strict: false,
        }
    }

    pub fn first_alarm(&self, scores: &[f64]) -> Option<usize> {
        scores.iter().position(|&s| {
            if self.strict {
                s > self.threshold
            } else {
                s >= self.threshold
            }
        })
    }
}

/// Patient-level summary for classification metrics: the trajectory maximum
/// as the score (matching the alarm semantics), the binary label, and alarm
/// bookkeeping for lead-time analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub summary_score: f64,
    pub positive: bool,
    pub first_alarm_hour: Option<usize>,
    pub onset_hour: Option<usize>,
    pub age: f64,
    pub sex: Sex,
}

fn class_counts(pairs: &[(f64, bool)]) -> Result<(usize, usize)> {
    let p = pairs.iter().filter(|(_, y)| *y).count();
    let n = pairs.len() - p;
    if p == 0 || n == 0 {
        return Err(CshockError::Data(format!(
            "metric needs both classes; got {p} positives and {n} negatives"
        )));
    }
    Ok((p, n))
}

/// AUROC as the Mann-Whitney concordance probability, ties counted 0.5.
pub fn auroc(pairs: &[(f64, bool)]) -> Result<f64> {
    let (p, n) = class_counts(pairs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).expect("finite scores"));
    // Midranks over tie groups; 2 * sum of positive ranks stays integral.
    let mut two_rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let two_midrank = (i + j + 2) as f64;
        for &idx in &order[i..=j] {
            if pairs[idx].1 {
                two_rank_sum_pos += two_midrank;
            }
        }
        i = j + 1;
    }
    let numerator = two_rank_sum_pos - (p * (p + 1)) as f64;
    Ok(numerator / (2 * p * n) as f64)
}

/// Brute-force pairwise concordance; the independent oracle for `auroc`.
pub fn auroc_brute_force(pairs: &[(f64, bool)]) -> Result<f64> {
    let (p, n) = class_counts(pairs)?;
    let mut twice_concordant = 0u64;
    for (sp, _) in pairs.iter().filter(|(_, y)| *y) {
        for (sn, _) in pairs.iter().filter(|(_, y)| !*y) {
            if sp > sn {
                twice_concordant += 2;
            } else if sp == sn {
                twice_concordant += 1;
            }
        }
    }
    Ok(twice_concordant as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Stepwise ROC over all distinct thresholds, from (0,0) to (1,1).
pub fn roc_curve(pairs: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(pairs)?;
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold,
        });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC curve; equals `auroc` on the same pairs.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        area += 0.5 * (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr);
    }
    area
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Absent (with reason) when no alarms fire, rather than reported as 0.
    pub ppv: Option<f64>,
    pub ppv_absent_reason: Option<String>,
    pub recall: f64,
    pub specificity: f64,
    pub alarm_rate: f64,
}

/// Confusion-matrix ratios at a threshold (alarm fires at score >= threshold).
pub fn operating_point(pairs: &[(f64, bool)], threshold: f64) -> Result<OperatingPoint> {
    let (p, n) = class_counts(pairs)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(s, y) in pairs {
        if s >= threshold {
            if y {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let alarms = tp + fp;
    let (ppv, reason) = if alarms == 0 {
        (None, Some("no alarms at this threshold".to_string()))
    } else {
        (Some(tp as f64 / alarms as f64), None)
    };
    Ok(OperatingPoint {
        threshold,
        tp,
        fp,
        tn: n - fp,
        fn_: p - tp,
        ppv,
        ppv_absent_reason: reason,
        recall: tp as f64 / p as f64,
        specificity: (n - fp) as f64 / n as f64,
        alarm_rate: alarms as f64 / pairs.len() as f64,
    })
}

/// The largest threshold achieving recall >= target (within the documented
/// tolerance); ties break toward the higher threshold, i.e. fewer alarms.
pub fn threshold_for_sensitivity(pairs: &[(f64, bool)], target: f64) -> Result<f64> {
    if !(0.0 < target && target <= 1.0) {
        return Err(CshockError::InvalidArgument(format!(
            "sensitivity target must be in (0, 1], got {target}"
        )));
    }
    let (p, _) = class_counts(pairs)?;
    let mut pos_scores: Vec<f64> = pairs.iter().filter(|(_, y)| *y).map(|(s, _)| *s).collect();
    pos_scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let mut captured = 0usize;
    let mut i = 0;
    while i < pos_scores.len() {
        let threshold = pos_scores[i];
        while i < pos_scores.len() && pos_scores[i] == threshold {
            captured += 1;
            i += 1;
        }
        let recall = captured as f64 / p as f64;
        if recall >= target - SENSITIVITY_TOLERANCE {
            return Ok(threshold);
        }
    }
    Err(CshockError::Data(format!(
        "no threshold achieves recall >= {target}"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeSummary {
    /// Mean hours between first alarm and onset over detected positives.
    pub mean_hours: Option<f64>,
    pub leads: Vec<f64>,
    pub detected: usize,
    pub missed: usize,
    pub absent_reason: Option<String>,
}

/// Lead time over positives: onset_hour - first_alarm_hour for patients
/// whose alarm fired at or before onset; the rest count as misses.
pub fn lead_time(positives: &[&PatientOutcome]) -> LeadTimeSummary {
    let mut leads = Vec::new();
    let mut missed = 0usize;
    for p in positives {
        match (p.first_alarm_hour, p.onset_hour) {
            (Some(alarm), Some(onset)) if alarm <= onset => {
                leads.push((onset - alarm) as f64);
            }
            _ => missed += 1,
        }
    }
    let (mean, reason) = if leads.is_empty() {
        (None, Some("no detected positives".to_string()))
    } else {
        (Some(leads.iter().sum::<f64>() / leads.len() as f64), None)
    };
    LeadTimeSummary {
        mean_hours: mean,
        detected: leads.len(),
        missed,
        leads,
        absent_reason: reason,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Grouping {
    /// Quartile edges computed from the evaluated cohort's ages.
    AgeQuartiles,
    /// Fixed age edges (e.g. the 59/70/80 fixture preset).
    AgeEdges([f64; 3]),
    Sex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub group: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub absent_reason: Option<String>,
}

/// Nearest-rank quantile edges at 25/50/75%.
pub fn age_quartile_edges(ages: &[f64]) -> [f64; 3] {
    let mut sorted = ages.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ages"));
    let q = |p: f64| {
        let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[idx - 1]
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Per-group AUROC with across-folds spread: each fold's outcomes are
/// grouped independently and the per-group AUROCs are aggregated into a
/// mean and standard deviation over the folds that had both classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpread {
    pub group: String,
    pub mean_auroc: f64,
    pub sd_auroc: f64,
    pub folds: usize,
}

pub fn subgroup_auroc_across_folds(
    per_fold: &[Vec<PatientOutcome>],
    grouping: &Grouping,
) -> Vec<SubgroupSpread> {
    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for outcomes in per_fold {
        for result in subgroup_auroc(outcomes, grouping) {
            let Some(auc) = result.auroc else { continue };
            let idx = match names.iter().position(|n| *n == result.group) {
                Some(i) => i,
                None => {
                    names.push(result.group.clone());
                    values.push(Vec::new());
                    names.len() - 1
                }
            };
            values[idx].push(auc);
        }
    }
    names
        .into_iter()
        .zip(values)
        .map(|(group, aucs)| {
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            let var =
                aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / aucs.len() as f64;
            SubgroupSpread {
                group,
                mean_auroc: mean,
                sd_auroc: var.sqrt(),
                folds: aucs.len(),
            }
        })
        .collect()
}

/// Per-group AUROC; groups lacking both classes report an absence reason.
pub fn subgroup_auroc(patients: &[PatientOutcome], grouping: &Grouping) -> Vec<SubgroupResult> {
    let group_of: Box<dyn Fn(&PatientOutcome) -> String> = match grouping {
        Grouping::AgeQuartiles | Grouping::AgeEdges(_) => {
            let edges = match grouping {
                Grouping::AgeEdges(e) => *e,
                _ => age_quartile_edges(&patients.iter().map(|p| p.age).collect::<Vec<_>>()),
            };
            Box::new(move |p: &PatientOutcome| {
                if p.age < edges[0] {
                    format!("age<{}", edges[0])
                } else if p.age < edges[1] {
                    format!("age[{},{})", edges[0], edges[1])
                } else if p.age < edges[2] {
                    format!("age[{},{})", edges[1], edges[2])
                } else {
                    format!("age>={}", edges[2])
                }
            })
        }
        Grouping::Sex => Box::new(|p: &PatientOutcome| {
            match p.sex {
                Sex::Female => "female",
                Sex::Male => "male",
            }
            .to_string()
        }),
    };

    let mut names: Vec<String> = Vec::new();
    let mut buckets: Vec<Vec<(f64, bool)>> = Vec::new();
    for p in patients {
        let g = group_of(p);
        let idx = match names.iter().position(|n| *n == g) {
            Some(i) => i,
            None => {
                names.push(g);
                buckets.push(Vec::new());
                names.len() - 1
            }
        };
        buckets[idx].push((p.summary_score, p.positive));
    }
    names
        .into_iter()
        .zip(buckets)
        .map(|(group, pairs)| {
            let n_pos = pairs.iter().filter(|(_, y)| *y).count();
            let n_neg = pairs.len() - n_pos;
            match auroc(&pairs) {
                Ok(a) => SubgroupResult {
                    group,
                    n_pos,
                    n_neg,
                    auroc: Some(a),
                    absent_reason: None,
                },
                Err(_) => SubgroupResult {
                    group,
                    n_pos,
                    n_neg,
                    auroc: None,
                    absent_reason: Some("group lacks one of the classes".to_string()),
                },
            }
        })
        .collect()
}
