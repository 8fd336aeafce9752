//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its runtime. Run with
//! `cargo test -p cshock-cli --test acceptance -- --nocapture`.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cshock::cohort::adjudicate::{adjudicate, TriggeringRule};
use cshock::cohort::exclusions::apply_exclusions;
use cshock::cohort::generate::{
    generate_cohort, transfer_pair_configs, DriverSpec, GeneratorConfig,
};
use cshock::cohort::preprocess::preprocess;
use cshock::cohort::{ChartEtiology, EventLabel, RawStream, SupportEvent, SupportKind};
use cshock::eval::{
    auroc, auroc_brute_force, operating_point, roc_curve, threshold_for_sensitivity,
    SENSITIVITY_TOLERANCE,
};
use cshock::interpret::{
    exact_shapley, exact_shapley_by_permutations, fastshap_explain, rank_features,
    topk_retention_curve, train_explainer, train_surrogate, ExplainerTrainConfig,
    SurrogateOptions,
};
use cshock::model::loss::{softmax_weighted_risk, value_function};
use cshock::model::{BatchItem, RiskModel, RiskModelConfig};
use cshock::schema::FeatureSchema;
use cshock::tensor::gradcheck::{central_difference, relative_error};
use cshock::tensor::graph::{Graph, Mode};
use cshock::tensor::Tensor;
use cshock::train::{
    cross_validate, make_splits, pretrain_mortality, train_fold, FoldInputs, TrainRunConfig,
};
use cshock::model::checkpoint::TrainTask;

fn pass(criterion: usize, name: &str, start: Instant, budget: Duration) {
    let elapsed = start.elapsed();
    println!("ACCEPTANCE {criterion} {name}: PASS ({elapsed:.2?})");
    assert!(
        elapsed < budget,
        "criterion {criterion} exceeded its {budget:?} budget: {elapsed:?}"
    );
}

fn random_model(rng: &mut ChaCha8Rng, max_channels: usize) -> (RiskModel, usize) {
    let layers = rng.gen_range(1..=2usize);
    let channels: Vec<usize> = (0..layers).map(|_| rng.gen_range(2..=max_channels)).collect();
    let kernel = rng.gen_range(1..=3usize);
    let dilations: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=3usize)).collect();
    let in_channels = rng.gen_range(2..=5usize);
    let mut config = RiskModelConfig::custom(channels, kernel, dilations);
    config.dropout_rate = 0.0;
    let model = RiskModel::new(config, in_channels, rng.gen()).expect("valid config");
    (model, in_channels)
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    in_channels: usize,
) -> Vec<(Tensor, usize, bool)> {
    let b = rng.gen_range(2..=3usize);
    (0..b)
        .map(|i| {
            let len = rng.gen_range(4..=9usize);
            let data: Vec<f64> = (0..in_channels * len)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect();
            (
                Tensor::new(vec![in_channels, len], data).unwrap(),
                len,
                i % 2 == 0,
            )
        })
        .collect()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE01);
    for trial in 0..50 {
        let (mut model, in_channels) = random_model(&mut rng, 4);
        let batch = random_batch(&mut rng, in_channels);
        let theta0 = model.params.flatten_trainable();
        assert!(
            theta0.len() <= 500,
            "trial {trial}: {} parameters exceed the 500 cap",
            theta0.len()
        );

        let loss_at = |model: &mut RiskModel, theta: &[f64]| {
            model.params.load_trainable(theta).unwrap();
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|(channels, len, positive)| BatchItem {
                    channels,
                    len: *len,
                    positive: *positive,
                })
                .collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
            let pass = model
                .batch_loss(&items, Mode::Train, &mut dropout_rng)
                .unwrap();
            pass.forward.graph.value(pass.loss).item()
        };

        let mut f = |theta: &[f64]| loss_at(&mut model, theta);
        let fd = central_difference(&mut f, &theta0, 1e-5);

        model.params.load_trainable(&theta0).unwrap();
        let items: Vec<BatchItem> = batch
            .iter()
            .map(|(channels, len, positive)| BatchItem {
                channels,
                len: *len,
                positive: *positive,
            })
            .collect();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = model
            .batch_loss(&items, Mode::Train, &mut dropout_rng)
            .unwrap();
        pass.forward.graph.backward(pass.loss).unwrap();
        let grads = model.harvest_gradients(&pass.forward);
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();

        assert_eq!(analytic.len(), fd.len());
        for (i, (a, n)) in analytic.iter().zip(&fd).enumerate() {
            let err = relative_error(*a, *n);
            assert!(
                err < 1e-4,
                "trial {trial} parameter {i}: analytic {a} vs fd {n} (rel err {err})"
            );
        }
    }
    pass(1, "gradient correctness", start, Duration::from_secs(60));
}

#[test]
fn criterion_02_causality_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE02);
    for trial in 0..100 {
        let (mut model, in_channels) = random_model(&mut rng, 5);
        // Non-trivial frozen statistics so eval-mode batch norm is exercised.
        for l in 0..model.config.num_layers {
            let name = format!("layer{l}.bn.running_mean");
            for v in model.params.get_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let name = format!("layer{l}.bn.running_var");
            for v in model.params.get_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(0.2..2.0);
            }
        }
        let len = rng.gen_range(5..=12usize);
        let data: Vec<f64> = (0..in_channels * len)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let channels = Tensor::new(vec![in_channels, len], data.clone()).unwrap();
        let baseline = model.trajectory_scores(&channels, len).unwrap();

        let cut = rng.gen_range(0..len - 1);
        let mut perturbed = data;
        for ch in 0..in_channels {
            for t in cut + 1..len {
                perturbed[ch * len + t] += rng.gen_range(1.0..100.0);
            }
        }
        let perturbed = Tensor::new(vec![in_channels, len], perturbed).unwrap();
        let shifted = model.trajectory_scores(&perturbed, len).unwrap();
        for t in 0..=cut {
            assert_eq!(
                baseline[t].to_bits(),
                shifted[t].to_bits(),
                "trial {trial}: future perturbation leaked into hour {t}"
            );
        }
    }
    pass(2, "causality suite", start, Duration::from_secs(60));
}

#[test]
fn criterion_03_loss_semantics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE03);

    // Bounding: min <= softmax-weighted risk <= max.
    for _ in 0..200 {
        let n = rng.gen_range(1..=20usize);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha = rng.gen_range(0.1..60.0);
        let v = softmax_weighted_risk(&r, alpha).unwrap();
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
    }

    // Temperature limit: alpha = 50 with a unique max and gap >= 0.5.
    for _ in 0..100 {
        let n = rng.gen_range(2..=12usize);
        let max = rng.gen_range(0.8..1.0);
        let mut r: Vec<f64> = (0..n - 1)
            .map(|_| rng.gen_range(0.0..(max - 0.5)))
            .collect();
        r.insert(rng.gen_range(0..n), max);
        let v = softmax_weighted_risk(&r, 50.0).unwrap();
        assert!((v - max).abs() < 1e-6, "{v} vs max {max}");
    }

    // Gradient signs on a two-patient batch, cross-checked by differences.
    let pos_scores = [0.3, 0.8, 0.5];
    let neg_scores = [0.2, 0.6];
    let build = |p: &[f64], n: &[f64]| {
        let mut g = Graph::new();
        let pn = g.leaf(Tensor::vector(p.to_vec()), true);
        let nn = g.leaf(Tensor::vector(n.to_vec()), true);
        let sp = g.softmax_weighted(pn, 2.0).unwrap();
        let sn = g.softmax_weighted(nn, 2.0).unwrap();
        let loss = g.combine_scalars(&[(sn, 1.0), (sp, -1.0)]).unwrap();
        (g, pn, nn, loss)
    };
    let (mut g, pn, nn, loss) = build(&pos_scores, &neg_scores);
    g.backward(loss).unwrap();
    let gp = g.grad(pn).unwrap().to_vec();
    let gn = g.grad(nn).unwrap().to_vec();
    assert!(gp[1] < 0.0, "positive top-score gradient must be negative");
    assert!(gn[1] > 0.0, "negative top-score gradient must be positive");
    let mut f_pos = |p: &[f64]| {
        let (g, _, _, loss) = build(p, &neg_scores);
        g.value(loss).item()
    };
    let fd_pos = central_difference(&mut f_pos, &pos_scores, 1e-5);
    assert!(fd_pos[1] < 0.0);
    assert!(relative_error(gp[1], fd_pos[1]) < 1e-4);
    let mut f_neg = |n: &[f64]| {
        let (g, _, _, loss) = build(&pos_scores, n);
        g.value(loss).item()
    };
    let fd_neg = central_difference(&mut f_neg, &neg_scores, 1e-5);
    assert!(fd_neg[1] > 0.0);
    assert!(relative_error(gn[1], fd_neg[1]) < 1e-4);

    pass(3, "loss semantics", start, Duration::from_secs(60));
}

struct Golden {
    name: &'static str,
    stream: RawStream,
    label: EventLabel,
    onset: Option<usize>,
    rule: Option<TriggeringRule>,
}

fn base_stream(id: &str, end: f64) -> RawStream {
    // Normal systolic pressure every 15 minutes unless overridden.
    let mut sbp = Vec::new();
    let mut t = 0.0;
    while t < end {
        sbp.push((t, 115.0));
        t += 0.25;
    }
    RawStream {
        patient_id: id.into(),
        sbp,
        heart_rate: vec![(0.0, 80.0)],
        lactate: Vec::new(),
        creatinine: Vec::new(),
        creatinine_baseline: Some(1.0),
        urine_rate: Vec::new(),
        support_events: Vec::new(),
        chart_etiology: ChartEtiology::Cardiogenic,
        end_hour: end,
    }
}

/// Overwrite the SBP samples in [from, to) with `value`.
fn dip(stream: &mut RawStream, from: f64, to: f64, value: f64) {
    for (t, v) in stream.sbp.iter_mut() {
        if *t >= from && *t < to {
            *v = value;
        }
    }
}

fn golden_fixtures() -> Vec<Golden> {
    let mut out = Vec::new();

    // 1. 45-minute hypotension window with elevated lactate at hour 10.
    let mut s = base_stream("g01", 48.0);
    dip(&mut s, 10.0, 10.75, 85.0);
    s.lactate = vec![(10.0, 2.5)];
    out.push(Golden {
        name: "window plus lactate",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(10),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 2. Support initiation at hour 20 with no hypotension window.
    let mut s = base_stream("g02", 40.0);
    s.support_events.push(SupportEvent {
        hour: 20.0,
        kind: SupportKind::Pharmacologic,
        for_blood_pressure: true,
    });
    out.push(Golden {
        name: "pharmacologic support",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(20),
        rule: Some(TriggeringRule::SupportInitiation),
    });

    // 3. 20-minute dip only, no hypoperfusion.
    let mut s = base_stream("g03", 30.0);
    s.sbp = vec![(9.75, 115.0), (10.0, 85.0), (10.33, 115.0), (11.0, 116.0)];
    out.push(Golden {
        name: "short dip only",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 4. Window plus >= 6 h of low urine output.
    let mut s = base_stream("g04", 48.0);
    dip(&mut s, 14.0, 20.0, 82.0);
    s.urine_rate = (0..20).map(|h| (h as f64, if h >= 8 { 0.3 } else { 1.0 })).collect();
    // urine run starts hour 8, six hours reached at 14; window completes 14.5
    out.push(Golden {
        name: "window plus oliguria",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(14),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 5. Window plus creatinine at 1.5x baseline.
    let mut s = base_stream("g05", 48.0);
    dip(&mut s, 12.0, 14.0, 84.0);
    s.creatinine = vec![(2.0, 1.0), (11.0, 1.5)];
    out.push(Golden {
        name: "creatinine fold rise",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(12),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 6. Window plus creatinine +0.3 absolute rise.
    let mut s = base_stream("g06", 48.0);
    dip(&mut s, 12.0, 14.0, 84.0);
    s.creatinine = vec![(2.0, 1.0), (11.0, 1.31)];
    out.push(Golden {
        name: "creatinine absolute rise",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(12),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 7. Window with creatinine rise below both thresholds.
    let mut s = base_stream("g07", 48.0);
    dip(&mut s, 12.0, 14.0, 84.0);
    s.creatinine = vec![(2.0, 1.0), (11.0, 1.25)];
    out.push(Golden {
        name: "creatinine below thresholds",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 8. Window with lactate exactly 2.0 (rule is strictly greater).
    let mut s = base_stream("g08", 48.0);
    dip(&mut s, 12.0, 14.0, 84.0);
    s.lactate = vec![(11.0, 2.0)];
    out.push(Golden {
        name: "lactate exactly two",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 9. Window with lactate 2.01.
    let mut s = base_stream("g09", 48.0);
    dip(&mut s, 12.0, 14.0, 84.0);
    s.lactate = vec![(11.0, 2.01)];
    out.push(Golden {
        name: "lactate barely above two",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(12),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 10. Exactly-30-minute window boundary qualifies.
    let mut s = base_stream("g10", 48.0);
    s.sbp = vec![(9.5, 115.0), (10.0, 85.0), (10.5, 115.0), (11.0, 116.0)];
    s.lactate = vec![(9.0, 3.0)];
    out.push(Golden {
        name: "thirty minute boundary",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(10),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 11. 29-minute window misses the boundary.
    let mut s = base_stream("g11", 48.0);
    s.sbp = vec![(9.5, 115.0), (10.0, 85.0), (10.48, 115.0), (11.0, 116.0)];
    s.lactate = vec![(9.0, 3.0)];
    out.push(Golden {
        name: "twenty nine minute window",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 12. Hypoperfusion active long before the window: onset at window completion.
    let mut s = base_stream("g12", 48.0);
    dip(&mut s, 20.0, 21.0, 85.0);
    s.lactate = vec![(2.0, 3.0)];
    out.push(Golden {
        name: "early lactate late window",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(20),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 13. Window first, hypoperfusion later: onset when evidence appears.
    let mut s = base_stream("g13", 48.0);
    dip(&mut s, 8.0, 30.0, 84.0);
    s.lactate = vec![(15.3, 2.6)];
    out.push(Golden {
        name: "late lactate inside window",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(15),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 14. Mechanical circulatory support.
    let mut s = base_stream("g14", 30.0);
    s.support_events.push(SupportEvent {
        hour: 12.6,
        kind: SupportKind::MechanicalCirculatory,
        for_blood_pressure: true,
    });
    out.push(Golden {
        name: "mechanical support",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(12),
        rule: Some(TriggeringRule::SupportInitiation),
    });

    // 15. Support not aimed at blood pressure does not qualify.
    let mut s = base_stream("g15", 30.0);
    s.support_events.push(SupportEvent {
        hour: 12.6,
        kind: SupportKind::Pharmacologic,
        for_blood_pressure: false,
    });
    out.push(Golden {
        name: "non-qualifying support",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 16. Missing baseline: +0.3 rise from the first observed value.
    let mut s = base_stream("g16", 48.0);
    s.creatinine_baseline = None;
    s.creatinine = vec![(1.0, 1.0), (9.0, 1.32)];
    dip(&mut s, 9.5, 11.0, 84.0);
    out.push(Golden {
        name: "baseline fallback rise",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(10),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 17. Missing baseline: the 1.5-fold branch is disabled, so a 1.6-fold
    // rise that stays under +0.3 does not qualify.
    let mut s = base_stream("g17", 48.0);
    s.creatinine_baseline = None;
    s.creatinine = vec![(1.0, 0.4), (9.0, 0.65)];
    dip(&mut s, 9.5, 11.0, 84.0);
    out.push(Golden {
        name: "baseline fallback fold disabled",
        stream: s,
        label: EventLabel::NoShock,
        onset: None,
        rule: None,
    });

    // 18. Noncardiogenic etiology keeps the onset but flips the label.
    let mut s = base_stream("g18", 30.0);
    s.chart_etiology = ChartEtiology::Noncardiogenic;
    s.support_events.push(SupportEvent {
        hour: 8.4,
        kind: SupportKind::Pharmacologic,
        for_blood_pressure: true,
    });
    out.push(Golden {
        name: "noncardiogenic support",
        stream: s,
        label: EventLabel::NoncardiogenicOnly,
        onset: Some(8),
        rule: Some(TriggeringRule::SupportInitiation),
    });

    // 19. Two qualifying episodes: the earliest wins.
    let mut s = base_stream("g19", 48.0);
    dip(&mut s, 8.0, 9.0, 85.0);
    s.lactate = vec![(1.0, 3.0)];
    s.support_events.push(SupportEvent {
        hour: 30.0,
        kind: SupportKind::Pharmacologic,
        for_blood_pressure: true,
    });
    out.push(Golden {
        name: "earliest of two episodes",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(8),
        rule: Some(TriggeringRule::HypotensionPlusHypoperfusion),
    });

    // 20. Shock within four hours of admission (exclusion checked below).
    let mut s = base_stream("g20", 30.0);
    s.support_events.push(SupportEvent {
        hour: 3.2,
        kind: SupportKind::Pharmacologic,
        for_blood_pressure: true,
    });
    out.push(Golden {
        name: "early shock",
        stream: s,
        label: EventLabel::CardiogenicOrMixed,
        onset: Some(3),
        rule: Some(TriggeringRule::SupportInitiation),
    });

    out
}

#[test]
fn criterion_04_adjudicator_goldens() {
    let start = Instant::now();
    let goldens = golden_fixtures();
    assert_eq!(goldens.len(), 20);
    for g in &goldens {
        let result = adjudicate(&g.stream).unwrap_or_else(|e| panic!("{}: {e}", g.name));
        assert_eq!(result.label, g.label, "{}", g.name);
        assert_eq!(result.onset_hour, g.onset, "{}", g.name);
        assert_eq!(result.triggering_rule, g.rule, "{}", g.name);
        assert_eq!(result.onset_hour.is_some(), result.label != EventLabel::NoShock);
    }

    // The early-shock fixture must fall to the four-hour exclusion.
    let early = &goldens[19];
    let record = cshock::cohort::PatientRecord {
        patient_id: early.stream.patient_id.clone(),
        age: 60.0,
        sex: cshock::cohort::Sex::Male,
        hospital_stay_hours: 72.0,
        event_label: early.label,
        observed_time: early.onset.unwrap(),
        onset_hour: early.onset,
        mortality: false,
        statics: vec![],
        series: vec![],
    };
    let (kept, report) = apply_exclusions(vec![record]);
    assert!(kept.is_empty());
    assert_eq!(report.excluded_early_shock, 1);

    // A baseline-fallback audit entry appears when the baseline is missing.
    let fallback = adjudicate(&goldens[15].stream).unwrap();
    assert!(fallback
        .audit
        .iter()
        .any(|a| matches!(a.criterion, cshock::cohort::adjudicate::Criterion::BaselineFallback)));

    pass(4, "adjudicator golden fixtures", start, Duration::from_secs(60));
}

#[test]
fn criterion_05_end_to_end_learning() {
    let start = Instant::now();
    let schema = FeatureSchema::full();
    let (patients, manifest) =
        generate_cohort(&GeneratorConfig::new(1500, 0.136, 2024), &schema).unwrap();
    assert_eq!(patients.len(), 1500);
    assert!(manifest.counts.positives > 150);
    let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
    let cv = cross_validate(
        &records,
        &schema,
        &RiskModelConfig::desk(),
        &TrainRunConfig::desk(),
        2024,
        None,
    )
    .unwrap();
    println!(
        "  mean test AUROC {:.4} +- {:.4} over {} folds",
        cv.mean_test_auroc,
        cv.sd_test_auroc,
        cv.folds.len()
    );
    assert!(
        cv.mean_test_auroc >= 0.85,
        "mean test AUROC {} below 0.85",
        cv.mean_test_auroc
    );
    pass(5, "end-to-end learning", start, Duration::from_secs(900));
}

#[test]
fn criterion_06_pretraining_direction() {
    let start = Instant::now();
    let schema = FeatureSchema::custom(
        "transfer",
        &[
            ("heart_rate", "bpm"),
            ("sbp_no_support", "mmHg"),
            ("lactate", "mmol/L"),
            ("creatinine", "mg/dl"),
            ("urine_output_rate", "cc/kg/hr"),
            ("gcs_total", "score"),
            ("braden_scale", "score"),
            ("vital_x1", "arb"),
            ("vital_x2", "arb"),
            ("lab_x3", "arb"),
        ],
        &[("age", "years"), ("sex_male", "0/1")],
        true,
    );
    let (pre_cfg, study_cfg) = transfer_pair_configs(7117, 600, 200);
    let (pre_patients, _) = generate_cohort(&pre_cfg, &schema).unwrap();
    let pre_records: Vec<_> = pre_patients.into_iter().map(|p| p.record).collect();
    let (study_patients, _) = generate_cohort(&study_cfg, &schema).unwrap();
    let study_records: Vec<_> = study_patients.into_iter().map(|p| p.record).collect();

    let model_cfg = RiskModelConfig::custom(vec![16, 16], 2, vec![1, 4]);
    let mut pre_train_cfg = TrainRunConfig::desk();
    pre_train_cfg.epochs = 10;
    pre_train_cfg.batch_size = 32;
    let study_ids: Vec<String> = study_records.iter().map(|r| r.patient_id.clone()).collect();
    let (pre_ckpt, _) = pretrain_mortality(
        &pre_records,
        &study_ids,
        &schema,
        &model_cfg,
        &pre_train_cfg,
        41,
    )
    .unwrap();

    let mut fine_cfg = TrainRunConfig::desk();
    fine_cfg.epochs = 6;
    fine_cfg.batch_size = 32;
    let plan = make_splits(&study_records, 42, false).unwrap();
    let mut wins = 0;
    for fold in 0..4 {
        let inputs = FoldInputs::from_plan(&study_records, &plan, fold).unwrap();
        let scratch = train_fold(
            &inputs, &schema, &model_cfg, &fine_cfg, TrainTask::Shock, 43, fold, None,
        )
        .unwrap();
        let warm = train_fold(
            &inputs, &schema, &model_cfg, &fine_cfg, TrainTask::Shock, 43, fold,
            Some(&pre_ckpt),
        )
        .unwrap();
        let s = scratch.checkpoint.meta.val_auroc.unwrap();
        let w = warm.checkpoint.meta.val_auroc.unwrap();
        println!("  fold {fold}: from-scratch {s:.4} vs pretrained {w:.4}");
        if w >= s {
            wins += 1;
        }
    }
    assert!(wins >= 3, "pretraining helped on only {wins}/4 folds");
    pass(6, "pretraining direction", start, Duration::from_secs(1800));
}

fn ten_feature_schema() -> FeatureSchema {
    FeatureSchema::custom(
        "ten",
        &[
            ("heart_rate", "bpm"),
            ("sbp_no_support", "mmHg"),
            ("lactate", "mmol/L"),
            ("urine_output_rate", "cc/kg/hr"),
            ("creatinine", "mg/dl"),
            ("noise_a", "arb"),
            ("noise_b", "arb"),
            ("noise_c", "arb"),
        ],
        &[("age", "years"), ("sex_male", "0/1")],
        true,
    )
}

/// Positives truncate at onset; matching the negatives' stay range keeps
/// trajectory length uninformative so value must flow through features.
fn length_matched(mut config: GeneratorConfig) -> GeneratorConfig {
    config.negative_stay_range = (config.onset_hour_range.0, config.onset_hour_range.1);
    config.noncardiogenic_rate = 0.0;
    config
}

#[test]
fn criterion_07_shapley_correctness() {
    let start = Instant::now();

    // Exact oracle axioms on 200 structured random games (2..=10 players).
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE07);
    for trial in 0..200 {
        let n = rng.gen_range(2..=10usize);
        let linear: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inter: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, rng.gen_range(-0.5..0.5)))
            .collect();
        let eval_game = |keep: &[bool], linear: &[f64], inter: &[(usize, usize, f64)]| {
            let mut v = 0.0;
            for (k, c) in keep.iter().zip(linear) {
                if *k {
                    v += c;
                }
            }
            for &(i, j, c) in inter {
                if keep[i] && keep[j] {
                    v += c;
                }
            }
            v
        };
        let mut v = |keep: &[bool]| eval_game(keep, &linear, &inter);
        let phi = exact_shapley(n, &mut v).unwrap();

        // efficiency
        let gap = (phi.iter().sum::<f64>() - (v(&vec![true; n]) - v(&vec![false; n]))).abs();
        assert!(gap < 1e-6, "trial {trial}: efficiency gap {gap}");

        // null player 0
        let mut linear_null = linear.clone();
        linear_null[0] = 0.0;
        let inter_null: Vec<_> = inter
            .iter()
            .copied()
            .filter(|&(i, j, _)| i != 0 && j != 0)
            .collect();
        let mut v_null = |keep: &[bool]| eval_game(keep, &linear_null, &inter_null);
        let phi_null = exact_shapley(n, &mut v_null).unwrap();
        assert_eq!(phi_null[0], 0.0, "trial {trial}: null player");

        // symmetry between players 0 and 1
        let mut linear_sym = linear.clone();
        linear_sym[1] = linear_sym[0];
        let inter_sym: Vec<_> = inter
            .iter()
            .copied()
            .filter(|&(i, j, _)| i > 1 && j > 1)
            .collect();
        let mut v_sym = |keep: &[bool]| eval_game(keep, &linear_sym, &inter_sym);
        let phi_sym = exact_shapley(n, &mut v_sym).unwrap();
        assert!(
            (phi_sym[0] - phi_sym[1]).abs() < 1e-9,
            "trial {trial}: symmetry"
        );

        // linearity
        let linear_w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v_w = |keep: &[bool]| eval_game(keep, &linear_w, &[]);
        let phi_w = exact_shapley(n, &mut v_w).unwrap();
        let mut v_sum =
            |keep: &[bool]| eval_game(keep, &linear, &inter) + eval_game(keep, &linear_w, &[]);
        let phi_sum = exact_shapley(n, &mut v_sum).unwrap();
        for j in 0..n {
            assert!(
                (phi_sum[j] - (phi[j] + phi_w[j])).abs() < 1e-9,
                "trial {trial}: linearity"
            );
        }

        // independent permutation oracle for small games
        if n <= 6 {
            let oracle = exact_shapley_by_permutations(n, &mut v).unwrap();
            for (a, b) in phi.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: permutation oracle");
            }
        }
    }

    // Amortized estimator vs the oracle on 20 held-out ten-feature games.
    let schema = ten_feature_schema();
    let config = length_matched(GeneratorConfig::new(240, 0.25, 50));
    let (patients, _) = generate_cohort(&config, &schema).unwrap();
    let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
    let mut train_cfg = TrainRunConfig::desk();
    train_cfg.epochs = 8;
    train_cfg.batch_size = 32;
    let opts = SurrogateOptions::new(RiskModelConfig::custom(vec![12, 12], 2, vec![1, 2]), train_cfg);
    let outcome = train_surrogate(&records, &schema, &opts, 51).unwrap();
    let surrogate = outcome.checkpoint.to_model().unwrap();
    let pre = outcome.checkpoint.preprocessor.clone().unwrap();
    let prepared: Vec<_> = records
        .iter()
        .map(|r| preprocess(r, &schema, &pre).unwrap())
        .collect();
    let mut ecfg = ExplainerTrainConfig::default();
    ecfg.steps = 12000;
    ecfg.hidden = 96;
    ecfg.samples_per_record = 2;
    let explainer = train_explainer(&surrogate, &schema, &prepared[..160], &ecfg, 52).unwrap();

    let mut worst: f64 = 0.0;
    for rec in prepared.iter().skip(160).take(20) {
        let attr = fastshap_explain(&surrogate, &explainer, &schema, rec).unwrap();
        assert!(attr.efficiency_gap() < 1e-6);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut v = |keep: &[bool]| {
            let val = value_function(&surrogate, &schema, rec, keep).unwrap();
            lo = lo.min(val);
            hi = hi.max(val);
            val
        };
        let oracle = exact_shapley(10, &mut v).unwrap();
        let mae: f64 = attr
            .phi
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 10.0;
        let bound = 0.05 * (hi - lo);
        worst = worst.max(mae / (hi - lo));
        assert!(
            mae <= bound,
            "{}: MAE {mae} exceeds 0.05 * range {bound}",
            rec.patient_id
        );
    }
    println!("  worst amortized MAE/range over 20 games: {worst:.4}");
    pass(7, "shapley correctness", start, Duration::from_secs(600));
}

#[test]
fn criterion_08_interpretation_recovery() {
    let start = Instant::now();
    let tv: Vec<(&str, &str)> = vec![
        ("vital_driver", "arb"),
        ("vital_n1", "arb"),
        ("vital_n2", "arb"),
        ("vital_n3", "arb"),
        ("vital_n4", "arb"),
        ("vital_n5", "arb"),
    ];
    let schema = FeatureSchema::custom("planted", &tv, &[], true);
    let mut hits = 0;
    let total = 20;
    for seed in 0..total {
        let mut config = length_matched(GeneratorConfig::new(400, 0.3, 900 + seed));
        config.baseline_severity_range = (0.02, 0.10);
        config.drivers = vec![DriverSpec {
            feature: "vital_driver".into(),
            delta: 5.0,
            weight: 1.0,
            late: false,
        }];
        let (patients, _) = generate_cohort(&config, &schema).unwrap();
        let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
        let mut train_cfg = TrainRunConfig::desk();
        train_cfg.epochs = 14;
        train_cfg.batch_size = 16;
        train_cfg.learning_rate = 2e-3;
        train_cfg.balance_minority = false;
        let mut model_cfg = RiskModelConfig::custom(vec![6, 6], 2, vec![1, 2]);
        model_cfg.dropout_rate = 0.05;
        let opts = SurrogateOptions::new(model_cfg, train_cfg);
        let outcome = train_surrogate(&records, &schema, &opts, 900 + seed).unwrap();
        let surrogate = outcome.checkpoint.to_model().unwrap();
        let pre = outcome.checkpoint.preprocessor.clone().unwrap();
        let prepared: Vec<_> = records
            .iter()
            .take(140)
            .map(|r| preprocess(r, &schema, &pre).unwrap())
            .collect();
        let mut ecfg = ExplainerTrainConfig::default();
        ecfg.steps = 2200;
        ecfg.hidden = 48;
        let explainer =
            train_explainer(&surrogate, &schema, &prepared, &ecfg, 900 + seed).unwrap();
        let attrs: Vec<_> = prepared
            .iter()
            .map(|r| fastshap_explain(&surrogate, &explainer, &schema, r).unwrap())
            .collect();
        let ranking = rank_features(&schema, &attrs).unwrap();
        if ranking.entries[0].0 == "vital_driver" {
            hits += 1;
        }

        if seed == 0 {
            // Retention at k = all features equals the surrogate's
            // full-input AUROC exactly.
            let n = ranking.entries.len();
            let curve =
                topk_retention_curve(&surrogate, &schema, &ranking, &prepared, &[0, n]).unwrap();
            let full_point = curve.iter().find(|(k, _)| *k == n).unwrap().1;
            let pairs: Vec<(f64, bool)> = prepared
                .iter()
                .map(|rec| {
                    let traj = surrogate.trajectory(rec).unwrap();
                    (traj.max_score(), rec.is_positive())
                })
                .collect();
            let direct = auroc(&pairs).unwrap();
            assert_eq!(full_point, direct, "k=full retention must match exactly");
        }
    }
    println!("  planted driver ranked first in {hits}/{total} seeds");
    assert!(hits >= 18, "driver first in only {hits}/{total} seeds");
    pass(8, "interpretation recovery", start, Duration::from_secs(1200));
}

#[test]
fn criterion_09_metric_cross_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE09);
    let dir = tempfile::tempdir().unwrap();

    for trial in 0..100 {
        let n = rng.gen_range(5..=60usize);
        // quantized scores force ties
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0..=25u32) as f64 / 25.0,
                    rng.gen::<f64>() < 0.4,
                )
            })
            .collect();
        let p = pairs.iter().filter(|(_, y)| *y).count();
        if p == 0 || p == n {
            continue;
        }

        // AUROC equals brute-force pairwise concordance exactly.
        let fast = auroc(&pairs).unwrap();
        let slow = auroc_brute_force(&pairs).unwrap();
        assert_eq!(fast.to_bits(), slow.to_bits(), "trial {trial}");

        // ROC CSV round trip preserves the trapezoid area to 1e-12.
        let curve = roc_curve(&pairs).unwrap();
        let path = dir.path().join(format!("roc{trial}.csv"));
        cshock::pipeline::write_roc_csv(&path, &curve).unwrap();
        let area = cshock::pipeline::roc_csv_area(&path).unwrap();
        assert!(
            (area - fast).abs() < 1e-12,
            "trial {trial}: area {area} vs auroc {fast}"
        );

        // threshold_for_sensitivity maximality.
        let target = rng.gen_range(0.05..1.0f64);
        let threshold = threshold_for_sensitivity(&pairs, target).unwrap();
        let recall_at = |t: f64| operating_point(&pairs, t).unwrap().recall;
        assert!(recall_at(threshold) >= target - SENSITIVITY_TOLERANCE);
        assert!(
            recall_at(threshold + 1e-9) < target - SENSITIVITY_TOLERANCE,
            "trial {trial}: threshold {threshold} not maximal for target {target}"
        );
    }
    pass(9, "metric cross-checks", start, Duration::from_secs(60));
}

fn run_cli(root: &Path, args: &[&str]) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_cshock"))
        .current_dir(root)
        .args(args)
        .output()
        .expect("spawn cshock");
    assert!(
        out.status.success(),
        "cshock {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn collect_files(root: &Path, prefix: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(root).unwrap() {
        let entry = entry.unwrap();
        let rel = prefix.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            collect_files(&entry.path(), &rel, out);
        } else {
            out.push(rel);
        }
    }
}

#[test]
fn criterion_10_reproducibility() {
    let start = Instant::now();
    let run = |root: &Path| {
        std::fs::create_dir_all(root).unwrap();
        let tiny_config = serde_json::json!({
            "model": {
                "num_layers": 2, "channels": [6, 6], "kernel_size": 2, "dilations": [1, 2],
                "dropout_rate": 0.1, "alpha": 2.0, "bn_momentum": 0.1, "bn_eps": 1e-5,
                "mean_reduction": false
            },
            "train": {
                "epochs": 3, "learning_rate": 0.001, "batch_size": 32,
                "balance_minority": true, "independent_resplits": false
            }
        });
        std::fs::write(root.join("config.json"), tiny_config.to_string()).unwrap();
        let fit_config = serde_json::json!({
            "surrogate": {
                "model": {
                    "num_layers": 1, "channels": [6], "kernel_size": 2, "dilations": [1],
                    "dropout_rate": 0.1, "alpha": 2.0, "bn_momentum": 0.1, "bn_eps": 1e-5,
                    "mean_reduction": false
                },
                "train": {
                    "epochs": 2, "learning_rate": 0.001, "batch_size": 32,
                    "balance_minority": true, "independent_resplits": false
                },
                "keep_probability": 0.5
            },
            "explainer": {
                "steps": 120, "batch_size": 8, "learning_rate": 0.002,
                "lr_decay": 0.25, "hidden": 16, "samples_per_record": 1
            }
        });
        std::fs::write(root.join("fit.json"), fit_config.to_string()).unwrap();

        run_cli(
            root,
            &[
                "generate", "--size", "60", "--positive-rate", "0.3", "--seed", "77",
                "--schema", "reduced", "--out", "gen",
            ],
        );
        run_cli(
            root,
            &[
                "train", "--cohort", "gen/cohort.jsonl", "--schema", "gen/schema.json",
                "--config", "config.json", "--seed", "77", "--out", "train",
            ],
        );
        run_cli(
            root,
            &[
                "evaluate", "--cohort", "gen/cohort.jsonl", "--schema", "gen/schema.json",
                "--checkpoint", "train/fold0.ckpt.json", "--sensitivity", "0.8",
                "--out", "eval",
            ],
        );
        run_cli(
            root,
            &[
                "fit-explainer", "--cohort", "gen/cohort.jsonl", "--schema",
                "gen/schema.json", "--config", "fit.json", "--seed", "77", "--out", "fitex",
            ],
        );
        run_cli(
            root,
            &[
                "explain", "--cohort", "gen/cohort.jsonl", "--schema", "gen/schema.json",
                "--surrogate", "fitex/surrogate.ckpt.json", "--explainer",
                "fitex/explainer.json", "--topk", "5", "--out", "explain",
            ],
        );
    };

    let dir = tempfile::tempdir().unwrap();
    let root_a = dir.path().join("a");
    let root_b = dir.path().join("b");
    run(&root_a);
    run(&root_b);

    let mut files = Vec::new();
    collect_files(&root_a, Path::new(""), &mut files);
    files.sort();
    assert!(
        files.iter().any(|f| f.ends_with("manifest.json")),
        "expected manifests in the output tree"
    );
    assert!(files.len() > 15, "expected a full artifact tree, got {files:?}");
    for rel in files {
        let a = std::fs::read(root_a.join(&rel)).unwrap();
        let b = std::fs::read(root_b.join(&rel)).unwrap();
        assert_eq!(
            a,
            b,
            "{} differs between identical pipeline runs",
            rel.display()
        );
    }
    pass(10, "reproducibility", start, Duration::from_secs(600));
}
