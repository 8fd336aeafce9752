//! End-to-end training behavior on generated cohorts.

use cshock::cohort::generate::{generate_cohort, GeneratorConfig};
use cshock::cohort::preprocess::preprocess;
use cshock::model::checkpoint::TrainTask;
use cshock::model::loss::softmax_weighted_risk;
use cshock::model::RiskModelConfig;
use cshock::schema::FeatureSchema;
use cshock::train::{cross_validate, make_splits, train_fold, FoldInputs, TrainRunConfig};

fn small_schema() -> FeatureSchema {
    FeatureSchema::custom(
        "train-integration",
        &[
            ("heart_rate", "bpm"),
            ("sbp_no_support", "mmHg"),
            ("lactate", "mmol/L"),
            ("creatinine", "mg/dl"),
            ("urine_output_rate", "cc/kg/hr"),
            ("gcs_total", "score"),
            ("braden_scale", "score"),
            ("vital_f1", "arb"),
            ("lab_f2", "arb"),
            ("lab_f3", "arb"),
        ],
        &[("age", "years"), ("sex_male", "0/1")],
        true,
    )
}

/// Spearman rank correlation with midranks for ties.
fn spearman(pairs: &[(f64, f64)]) -> f64 {
    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut out = vec![0.0; values.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                out[idx] = midrank;
            }
            i = j + 1;
        }
        out
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rx = ranks(&xs);
    let ry = ranks(&ys);
    let n = pairs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn separable_cohort_reaches_high_validation_auroc() {
    let schema = small_schema();
    let (patients, _) = generate_cohort(&GeneratorConfig::new(200, 0.25, 77), &schema).unwrap();
    let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
    let model_config = RiskModelConfig::custom(vec![16, 16], 2, vec![1, 2]);
    let mut train_config = TrainRunConfig::desk();
    train_config.epochs = 10;
    train_config.batch_size = 32;
    let cv = cross_validate(&records, &schema, &model_config, &train_config, 123, None).unwrap();
    for fold in &cv.folds {
        assert!(
            fold.checkpoint.meta.val_auroc.unwrap() >= 0.95,
            "fold stalled at {:?}",
            fold.checkpoint.meta.val_auroc
        );
    }
}

#[test]
fn trained_scores_track_generator_severity() {
    let schema = small_schema();
    let (patients, _) = generate_cohort(&GeneratorConfig::new(200, 0.25, 31), &schema).unwrap();
    let records: Vec<_> = patients.iter().map(|p| p.record.clone()).collect();
    let plan = make_splits(&records, 32, false).unwrap();
    let inputs = FoldInputs::from_plan(&records, &plan, 0).unwrap();
    let model_config = RiskModelConfig::custom(vec![16, 16], 2, vec![1, 2]);
    let mut train_config = TrainRunConfig::desk();
    train_config.epochs = 8;
    train_config.batch_size = 32;
    let fold = train_fold(
        &inputs,
        &schema,
        &model_config,
        &train_config,
        TrainTask::Shock,
        33,
        0,
        None,
    )
    .unwrap();
    let model = fold.checkpoint.to_model().unwrap();
    let pre = fold.checkpoint.preprocessor.as_ref().unwrap();

    // Within-stay tracking: on positive test patients the hazard ramps to
    // onset, and the hourly score must ride the ramp.
    let test_ids: Vec<&str> = inputs.test.iter().map(|r| r.patient_id.as_str()).collect();
    let mut rhos = Vec::new();
    for p in &patients {
        if !test_ids.contains(&p.record.patient_id.as_str()) || !p.record.is_positive() {
            continue;
        }
        let prepared = preprocess(&p.record, &schema, pre).unwrap();
        let traj = model.trajectory(&prepared).unwrap();
        let pairs: Vec<(f64, f64)> = traj
            .scores
            .iter()
            .zip(&p.severity)
            .map(|(s, z)| (*s, *z))
            .collect();
        rhos.push(spearman(&pairs));
    }
    assert!(rhos.len() >= 5, "too few positive test patients");
    let mean_rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!(mean_rho > 0.5, "score-severity Spearman rho {mean_rho}");
}

#[test]
fn checkpoint_reload_reproduces_recorded_validation_loss() {
    let schema = small_schema();
    let (patients, _) = generate_cohort(&GeneratorConfig::new(90, 0.3, 41), &schema).unwrap();
    let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
    let plan = make_splits(&records, 42, false).unwrap();
    let inputs = FoldInputs::from_plan(&records, &plan, 2).unwrap();
    let model_config = RiskModelConfig::custom(vec![6], 2, vec![1]);
    let mut train_config = TrainRunConfig::desk();
    train_config.epochs = 3;
    train_config.batch_size = 16;
    let fold = train_fold(
        &inputs,
        &schema,
        &model_config,
        &train_config,
        TrainTask::Shock,
        43,
        2,
        None,
    )
    .unwrap();

    // Serialize, reload, and recompute the validation loss bit-for-bit.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    fold.checkpoint.save(&path).unwrap();
    let reloaded = cshock::model::checkpoint::ModelCheckpoint::load(&path).unwrap();
    let model = reloaded.to_model().unwrap();
    let pre = reloaded.preprocessor.as_ref().unwrap();
    let mut val_loss = 0.0;
    for record in &inputs.validation {
        let prepared = preprocess(record, &schema, pre).unwrap();
        let traj = model.trajectory(&prepared).unwrap();
        let v = softmax_weighted_risk(&traj.scores, model.config.alpha).unwrap();
        val_loss += if record.is_positive() { -v } else { v };
    }
    assert_eq!(Some(val_loss), reloaded.meta.val_loss);
}

#[test]
fn full_scale_split_counts() {
    let schema = small_schema();
    let (patients, _) = generate_cohort(&GeneratorConfig::new(1500, 0.136, 99), &schema).unwrap();
    let records: Vec<_> = patients.into_iter().map(|p| p.record).collect();
    let plan = make_splits(&records, 100, false).unwrap();
    for fold in &plan.folds {
        assert_eq!(fold.train.len(), 750);
        assert_eq!(fold.validation.len(), 375);
        assert_eq!(fold.test.len(), 375);
    }
}
