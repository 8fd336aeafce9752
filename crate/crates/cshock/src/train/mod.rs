//! Cross-validated training: stratified splits, minority oversampling, the
//! epoch loop with validation-AUROC checkpoint selection, and mortality
//! pretraining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::preprocess::{fit_preprocessor, preprocess, PreparedRecord};
use crate::cohort::PatientRecord;
use crate::error::{CshockError, Result};
use crate::eval::auroc;
use crate::model::checkpoint::{CheckpointKind, CheckpointMeta, ModelCheckpoint, TrainTask};
use crate::model::{BatchItem, RiskModel, RiskModelConfig};
use crate::schema::FeatureSchema;
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::graph::Mode;
use crate::util::child_seed;

pub const FOLD_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub balance_minority: bool,
    /// Draw 4 independent random splits instead of rotating one partition.
    pub independent_resplits: bool,
}

impl TrainRunConfig {
    /// Full-scale settings: 50 epochs, batch 256.
    pub fn full_scale() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            balance_minority: true,
            independent_resplits: false,
        }
    }

    /// Laptop-scale settings: shorter schedule, batch 64.
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CshockError::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CshockError::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Patient-id role assignment for every fold: train half, validation
/// quarter, test quarter, stratified by event type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified 4-fold plan: positives and negatives are shuffled and dealt
/// round-robin into 4 parts with one continuous counter, so every part size
/// stays within one patient of n/4 while both classes stay balanced; fold f
/// tests on part f, validates on part f+1, and trains on the remaining two.
pub fn make_splits(
    records: &[PatientRecord],
    seed: u64,
    independent_resplits: bool,
) -> Result<SplitPlan> {
    if records.len() < FOLD_COUNT * 4 {
        return Err(CshockError::Data(format!(
            "cohort of {} patients is too small for {}-fold cross-validation",
            records.len(),
            FOLD_COUNT
        )));
    }
    let build = |shuffle_seed: u64| -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut positives: Vec<String> = records
            .iter()
            .filter(|r| r.is_positive())
            .map(|r| r.patient_id.clone())
            .collect();
        let mut negatives: Vec<String> = records
            .iter()
            .filter(|r| !r.is_positive())
            .map(|r| r.patient_id.clone())
            .collect();
        positives.shuffle(&mut rng);
        negatives.shuffle(&mut rng);
        let mut parts: Vec<Vec<String>> = (0..FOLD_COUNT).map(|_| Vec::new()).collect();
        for (i, id) in positives.into_iter().chain(negatives).enumerate() {
            parts[i % FOLD_COUNT].push(id);
        }
        parts
    };

    let mut folds = Vec::with_capacity(FOLD_COUNT);
    if independent_resplits {
        for f in 0..FOLD_COUNT {
            let parts = build(child_seed(seed, &format!("independent-split.{f}")));
            folds.push(assemble_fold(&parts, 0));
        }
    } else {
        let parts = build(child_seed(seed, "rotating-split"));
        for f in 0..FOLD_COUNT {
            folds.push(assemble_fold(&parts, f));
        }
    }
    Ok(SplitPlan {
        fold_count: FOLD_COUNT,
        seed,
        folds,
    })
}

fn assemble_fold(parts: &[Vec<String>], fold: usize) -> FoldSplit {
    let test = parts[fold].clone();
    let validation = parts[(fold + 1) % FOLD_COUNT].clone();
    let mut train = Vec::new();
    train.extend(parts[(fold + 2) % FOLD_COUNT].iter().cloned());
    train.extend(parts[(fold + 3) % FOLD_COUNT].iter().cloned());
    FoldSplit {
        train,
        validation,
        test,
    }
}

/// Oversample the minority class with replacement up to the majority count.
/// Every original index appears at least once; the result is shuffled.
pub fn balance_minority(labels: &[bool], seed: u64) -> Result<Vec<usize>> {
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(CshockError::Data(
            "balancing needs at least one patient of each class".into(),
        ));
    }
    let (minority, majority) = if positives.len() <= negatives.len() {
        (positives, negatives)
    } else {
        (negatives, positives)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * majority.len());
    out.extend(&majority);
    out.extend(&minority);
    for _ in 0..majority.len() - minority.len() {
        out.push(minority[rng.gen_range(0..minority.len())]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
    pub test_auroc: Option<f64>,
}

fn task_label(rec: &PreparedRecord, task: TrainTask) -> bool {
    match task {
        TrainTask::Shock => rec.is_positive(),
        TrainTask::Mortality => rec.mortality,
    }
}

/// Patient-level summary pairs (max trajectory score, label) for AUROC.
fn summary_pairs(
    model: &RiskModel,
    records: &[&PreparedRecord],
    task: TrainTask,
) -> Result<Vec<(f64, bool)>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let traj = model.trajectory(rec)?;
        out.push((traj.max_score(), task_label(rec, task)));
    }
    Ok(out)
}

fn validation_metrics(
    model: &RiskModel,
    records: &[&PreparedRecord],
    task: TrainTask,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        let traj = model.trajectory(rec)?;
        let v = crate::model::loss::softmax_weighted_risk(&traj.scores, model.config.alpha)?;
        let label = task_label(rec, task);
        loss += if label { -v } else { v };
        pairs.push((traj.max_score(), label));
    }
    if model.config.mean_reduction {
        loss /= records.len() as f64;
    }
    let auc = auroc(&pairs)?;
    Ok((loss, auc))
}

pub struct FoldInputs<'a> {
    pub train: Vec<&'a PatientRecord>,
    pub validation: Vec<&'a PatientRecord>,
    pub test: Vec<&'a PatientRecord>,
}

impl<'a> FoldInputs<'a> {
    pub fn from_plan(
        records: &'a [PatientRecord],
        plan: &SplitPlan,
        fold: usize,
    ) -> Result<Self> {
        let find = |ids: &[String]| -> Result<Vec<&'a PatientRecord>> {
            ids.iter()
                .map(|id| {
                    records
                        .iter()
                        .find(|r| &r.patient_id == id)
                        .ok_or_else(|| CshockError::Data(format!("unknown patient id {id}")))
                })
                .collect()
        };
        let split = plan
            .folds
            .get(fold)
            .ok_or_else(|| CshockError::InvalidArgument(format!("fold {fold} out of range")))?;
        Ok(Self {
            train: find(&split.train)?,
            validation: find(&split.validation)?,
            test: find(&split.test)?,
        })
    }
}

/// Train one fold: fit the preprocessor on the training split only, run the
/// full epoch budget, and return the epoch with the best validation AUROC.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    inputs: &FoldInputs,
    schema: &FeatureSchema,
    model_config: &RiskModelConfig,
    train_config: &TrainRunConfig,
    task: TrainTask,
    seed: u64,
    fold: usize,
    pretrained: Option<&ModelCheckpoint>,
) -> Result<TrainedFold> {
    train_config.validate()?;
    model_config.validate()?;
    let preprocessor = fit_preprocessor(&inputs.train, schema)?;
    let prepare = |records: &[&PatientRecord]| -> Result<Vec<PreparedRecord>> {
        records
            .iter()
            .map(|r| preprocess(r, schema, &preprocessor))
            .collect()
    };
    let train_recs = prepare(&inputs.train)?;
    let val_recs = prepare(&inputs.validation)?;
    let test_recs = prepare(&inputs.test)?;
    let val_refs: Vec<&PreparedRecord> = val_recs.iter().collect();

    let mut model = match pretrained {
        Some(ckpt) => {
            if ckpt.schema_fingerprint != schema.fingerprint() {
                return Err(CshockError::Data(
                    "pretrained checkpoint was built for a different schema".into(),
                ));
            }
            let m = ckpt.to_model()?;
            if m.in_channels != schema.input_channels() {
                return Err(CshockError::Shape(format!(
                    "pretrained model expects {} channels, schema provides {}",
                    m.in_channels,
                    schema.input_channels()
                )));
            }
            m
        }
        None => RiskModel::new(
            model_config.clone(),
            schema.input_channels(),
            child_seed(seed, &format!("init.fold{fold}")),
        )?,
    };

    let labels: Vec<bool> = train_recs.iter().map(|r| task_label(r, task)).collect();
    let train_indices: Vec<usize> = if train_config.balance_minority {
        balance_minority(&labels, child_seed(seed, &format!("balance.fold{fold}")))?
    } else {
        (0..train_recs.len()).collect()
    };

    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(train_config.learning_rate),
        &model.params,
    );
    let mut log = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(f64, usize, RiskModel)> = None;

    for epoch in 1..=train_config.epochs {
        let mut order = train_indices.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(child_seed(seed, &format!("shuffle.fold{fold}.epoch{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem::from_record(&train_recs[i], labels[i]))
                .collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(child_seed(
                seed,
                &format!("dropout.fold{fold}.epoch{epoch}.batch{batch_idx}"),
            ));
            let mut batch = model.batch_loss(&items, Mode::Train, &mut dropout_rng)?;
            let loss_value = batch.forward.graph.value(batch.loss).item();
            if !loss_value.is_finite() {
                let last_finite = epoch.saturating_sub(1);
                return Err(CshockError::Numerical(format!(
                    "fold {fold}: non-finite loss at epoch {epoch} batch {batch_idx}; last finite epoch {last_finite}"
                )));
            }
            epoch_loss += loss_value;
            batches += 1;
            batch.forward.graph.backward(batch.loss)?;
            let grads = model.harvest_gradients(&batch.forward);
            model.commit_bn_stats(&batch.forward.bn_stats);
            adam.apply(&mut model.params, &grads)?;
        }

        let (val_loss, val_auroc) = validation_metrics(&model, &val_refs, task)?;
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            val_auroc,
        });
        let improved = match &best {
            None => true,
            Some((best_auc, _, _)) => val_auroc > *best_auc,
        };
        if improved {
            best = Some((val_auroc, epoch, model.clone()));
        }
    }

    let (best_auroc, best_epoch, best_model) = best.expect("at least one epoch ran");
    let best_val_loss = log[best_epoch - 1].val_loss;
    let test_auroc = if test_recs.is_empty() {
        None
    } else {
        let test_refs: Vec<&PreparedRecord> = test_recs.iter().collect();
        Some(auroc(&summary_pairs(&best_model, &test_refs, task)?)?)
    };

    let checkpoint = ModelCheckpoint::from_model(
        &best_model,
        match task {
            TrainTask::Shock => CheckpointKind::RiskModel,
            TrainTask::Mortality => CheckpointKind::Pretrain,
        },
        &schema.fingerprint(),
        Some(preprocessor),
        CheckpointMeta {
            seed,
            fold: Some(fold),
            task: Some(task),
            best_epoch: Some(best_epoch),
            val_auroc: Some(best_auroc),
            val_loss: Some(best_val_loss),
            pretrained_fingerprint: pretrained.map(|c| c.fingerprint()),
            pretrain_patient_ids: None,
            masking_rate: None,
        },
    );
    Ok(TrainedFold {
        checkpoint,
        log,
        test_auroc,
    })
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<TrainedFold>,
    pub mean_test_auroc: f64,
    pub sd_test_auroc: f64,
    pub plan: SplitPlan,
}

/// Train all folds independently and average the test AUROC.
pub fn cross_validate(
    records: &[PatientRecord],
    schema: &FeatureSchema,
    model_config: &RiskModelConfig,
    train_config: &TrainRunConfig,
    seed: u64,
    pretrained: Option<&ModelCheckpoint>,
) -> Result<CrossValidation> {
    let plan = make_splits(records, child_seed(seed, "splits"), train_config.independent_resplits)?;
    let mut folds = Vec::with_capacity(plan.fold_count);
    for f in 0..plan.fold_count {
        let inputs = FoldInputs::from_plan(records, &plan, f)?;
        folds.push(train_fold(
            &inputs,
            schema,
            model_config,
            train_config,
            TrainTask::Shock,
            seed,
            f,
            pretrained,
        )?);
    }
    let aucs: Vec<f64> = folds
        .iter()
        .map(|f| f.test_auroc.expect("cross-validation folds carry test sets"))
        .collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / aucs.len() as f64;
    Ok(CrossValidation {
        folds,
        mean_test_auroc: mean,
        sd_test_auroc: var.sqrt(),
        plan,
    })
}

/// Pretrain on in-hospital mortality with the same loss, mortality as the
/// positive event. The pretraining cohort must be disjoint from the study
/// cohort; the checkpoint records the pretraining ids so downstream loads
/// can re-assert it.
pub fn pretrain_mortality(
    pretrain_records: &[PatientRecord],
    study_ids: &[String],
    schema: &FeatureSchema,
    model_config: &RiskModelConfig,
    train_config: &TrainRunConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, Vec<EpochLog>)> {
    let study: std::collections::HashSet<&str> = study_ids.iter().map(|s| s.as_str()).collect();
    let mut overlap: Vec<&str> = pretrain_records
        .iter()
        .map(|r| r.patient_id.as_str())
        .filter(|id| study.contains(id))
        .collect();
    if !overlap.is_empty() {
        overlap.sort_unstable();
        return Err(CshockError::Data(format!(
            "pretraining cohort overlaps the study cohort: {}",
            overlap.join(", ")
        )));
    }

    // Internal stratified 80/20 train/validation split on mortality.
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "pretrain.split"));
    let mut died: Vec<&PatientRecord> = pretrain_records.iter().filter(|r| r.mortality).collect();
    let mut survived: Vec<&PatientRecord> =
        pretrain_records.iter().filter(|r| !r.mortality).collect();
    if died.is_empty() || survived.is_empty() {
        return Err(CshockError::Data(
            "pretraining needs both mortality outcomes".into(),
        ));
    }
    died.shuffle(&mut rng);
    survived.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (k, r) in died.into_iter().enumerate() {
        if k % 5 == 0 {
            validation.push(r);
        } else {
            train.push(r);
        }
    }
    for (k, r) in survived.into_iter().enumerate() {
        if k % 5 == 0 {
            validation.push(r);
        } else {
            train.push(r);
        }
    }
    let inputs = FoldInputs {
        train,
        validation,
        test: Vec::new(),
    };
    let trained = train_fold(
        &inputs,
        schema,
        model_config,
        train_config,
        TrainTask::Mortality,
        seed,
        0,
        None,
    )?;
    let mut checkpoint = trained.checkpoint;
    checkpoint.meta.pretrain_patient_ids = Some(
        pretrain_records
            .iter()
            .map(|r| r.patient_id.clone())
            .collect(),
    );
    Ok((checkpoint, trained.log))
}

/// Re-assert pretraining/study disjointness when loading a checkpoint.
pub fn assert_pretrain_disjoint(ckpt: &ModelCheckpoint, study_ids: &[String]) -> Result<()> {
    if let Some(pretrain_ids) = &ckpt.meta.pretrain_patient_ids {
        let study: std::collections::HashSet<&str> =
            study_ids.iter().map(|s| s.as_str()).collect();
        let mut overlap: Vec<&str> = pretrain_ids
            .iter()
            .map(|s| s.as_str())
            .filter(|id| study.contains(id))
            .collect();
        if !overlap.is_empty() {
            overlap.sort_unstable();
            return Err(CshockError::Data(format!(
                "pretrained checkpoint shares patients with the study cohort: {}",
                overlap.join(", ")
            )));
        }
    }
    Ok(())
}
