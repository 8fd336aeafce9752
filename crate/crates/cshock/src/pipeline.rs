//! End-to-end pipeline steps behind the CLI: cohort generation,
//! adjudication, training, evaluation, explanation, and single-record
//! scoring, each writing a reproducible run manifest alongside its outputs.
//!
//! Every file these steps produce is a deterministic function of the inputs
//! and the master seed; wall-clock timing goes to stderr only, never into
//! artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::adjudicate::{adjudicate, AdjudicationResult};
use crate::cohort::exclusions::apply_exclusions;
use crate::cohort::generate::{generate_cohort, GeneratorConfig};
use crate::cohort::preprocess::{preprocess, PreparedRecord};
use crate::cohort::{
    read_cohort_jsonl, read_streams_csv, write_cohort_jsonl, write_streams_csv, PatientRecord,
};
use crate::error::{CshockError, Result};
use crate::eval::{
    age_quartile_edges, lead_time, operating_point, roc_area, roc_curve, subgroup_auroc,
    subgroup_auroc_across_folds, threshold_for_sensitivity, AlarmPolicy, Grouping,
    LeadTimeSummary, OperatingPoint, PatientOutcome, RocPoint, SubgroupResult, SubgroupSpread,
};
use crate::interpret::{
    beeswarm_rows, fastshap_explain, rank_features, topk_retention_curve, train_explainer,
    train_surrogate, Explainer, ExplainerTrainConfig, FeatureRanking, SurrogateOptions,
};
use crate::model::checkpoint::ModelCheckpoint;
use crate::model::{RiskModel, RiskModelConfig};
use crate::schema::FeatureSchema;
use crate::train::{
    assert_pretrain_disjoint, cross_validate, pretrain_mortality, EpochLog, FoldInputs,
    TrainRunConfig,
};
use crate::util::{child_seed, sha256_hex};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Replay record written next to every artifact-producing command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub schema_fingerprint: Option<String>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(
        serde_json::to_string(config)
            .expect("config serializes")
            .as_bytes(),
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Full,
    Reduced,
}

impl SchemaKind {
    pub fn build(self) -> FeatureSchema {
        match self {
            SchemaKind::Full => FeatureSchema::full(),
            SchemaKind::Reduced => FeatureSchema::reduced(),
        }
    }
}

/// Model + training settings bundle, loadable from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: RiskModelConfig,
    pub train: TrainRunConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: RiskModelConfig::desk(),
            train: TrainRunConfig::desk(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            model: RiskModelConfig::full_scale(),
            train: TrainRunConfig::full_scale(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))
    }
}

pub struct GenerateArgs {
    pub size: usize,
    pub positive_rate: f64,
    pub seed: u64,
    pub schema: SchemaKind,
    pub excludable_fraction: f64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateOutputs {
    pub cohort: PathBuf,
    pub streams: PathBuf,
    pub schema: PathBuf,
    pub generator_manifest: PathBuf,
    pub exclusions: PathBuf,
    pub retained: usize,
    pub positives: usize,
}

/// Generate a cohort, adjudicate nothing (labels are ground truth), apply
/// the inclusion filters, and write cohort JSONL + streams CSV + reports.
pub fn run_generate(args: &GenerateArgs) -> Result<GenerateOutputs> {
    ensure_dir(&args.out_dir)?;
    let schema = args.schema.build();
    let mut config = GeneratorConfig::new(args.size, args.positive_rate, args.seed);
    config.excludable_fraction = args.excludable_fraction;
    let (patients, gen_manifest) = generate_cohort(&config, &schema)?;

    let streams: Vec<_> = patients.iter().map(|p| p.stream.clone()).collect();
    let records: Vec<PatientRecord> = patients.into_iter().map(|p| p.record).collect();
    let (retained, exclusion_report) = apply_exclusions(records);
    let positives = retained.iter().filter(|r| r.is_positive()).count();

    let cohort_path = args.out_dir.join("cohort.jsonl");
    write_cohort_jsonl(&cohort_path, &retained)?;
    let streams_path = args.out_dir.join("streams.csv");
    write_streams_csv(&streams_path, &streams)?;
    let schema_path = args.out_dir.join("schema.json");
    std::fs::write(&schema_path, serde_json::to_string_pretty(&schema)?)?;
    let gen_path = args.out_dir.join("generator_manifest.json");
    std::fs::write(&gen_path, serde_json::to_string_pretty(&gen_manifest)?)?;
    let excl_path = args.out_dir.join("exclusions.json");
    std::fs::write(&excl_path, serde_json::to_string_pretty(&exclusion_report)?)?;

    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!(
                "generate --size {} --positive-rate {} --seed {} --schema {}",
                args.size,
                args.positive_rate,
                args.seed,
                match args.schema {
                    SchemaKind::Full => "full",
                    SchemaKind::Reduced => "reduced",
                }
            ),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: args.seed,
            config_hash: config_hash(&config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: Vec::new(),
            outputs: vec![
                "cohort.jsonl".into(),
                "streams.csv".into(),
                "schema.json".into(),
                "generator_manifest.json".into(),
                "exclusions.json".into(),
            ],
        },
    )?;
    Ok(GenerateOutputs {
        cohort: cohort_path,
        streams: streams_path,
        schema: schema_path,
        generator_manifest: gen_path,
        exclusions: excl_path,
        retained: exclusion_report.retained,
        positives,
    })
}

fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
    let schema: FeatureSchema = serde_json::from_str(&text)
        .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
    schema.validate()?;
    Ok(schema)
}

/// Run the rule engine over a streams CSV, writing adjudications JSONL.
pub fn run_adjudicate(streams_path: &Path, out_dir: &Path) -> Result<Vec<AdjudicationResult>> {
    ensure_dir(out_dir)?;
    let streams = read_streams_csv(streams_path)?;
    if streams.is_empty() {
        return Err(CshockError::Data(format!(
            "{}: no streams found",
            streams_path.display()
        )));
    }
    let mut results = Vec::with_capacity(streams.len());
    for s in &streams {
        results.push(adjudicate(s)?);
    }
    let out_path = out_dir.join("adjudications.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    for r in &results {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    write_manifest(
        out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "adjudicate".into(),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: 0,
            config_hash: String::new(),
            schema_fingerprint: None,
            inputs: vec![("streams".into(), streams_path.display().to_string())],
            outputs: vec!["adjudications.jsonl".into()],
        },
    )?;
    Ok(results)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub val_auroc: f64,
    pub test_auroc: f64,
    pub checkpoint: String,
    pub log: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub folds: Vec<FoldSummary>,
    pub mean_test_auroc: f64,
    pub sd_test_auroc: f64,
    pub split_assignment_hash: String,
    /// Test-split subgroup AUROC aggregated across folds (mean +- sd).
    pub subgroups_age: Vec<SubgroupSpread>,
    pub subgroups_sex: Vec<SubgroupSpread>,
    pub pretrained_fingerprint: Option<String>,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "epoch,train_loss,val_loss,val_auroc")?;
    for row in log {
        writeln!(
            file,
            "{},{},{},{}",
            row.epoch, row.train_loss, row.val_loss, row.val_auroc
        )?;
    }
    file.flush()?;
    Ok(())
}

pub struct TrainArgs {
    pub cohort: PathBuf,
    pub schema: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub pretrained: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// 4-fold cross-validated training; per-fold checkpoints and logs plus a
/// summary with mean and standard deviation of test AUROC.
pub fn run_train(args: &TrainArgs) -> Result<TrainSummary> {
    ensure_dir(&args.out_dir)?;
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.cohort)?;
    let pretrained = match &args.pretrained {
        Some(path) => {
            let ckpt = ModelCheckpoint::load(path)?;
            let study_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
            assert_pretrain_disjoint(&ckpt, &study_ids)?;
            Some(ckpt)
        }
        None => None,
    };
    let cv = cross_validate(
        &records,
        &schema,
        &args.config.model,
        &args.config.train,
        args.seed,
        pretrained.as_ref(),
    )?;
    let mut folds = Vec::with_capacity(cv.folds.len());
    let mut outputs = Vec::new();
    for (f, fold) in cv.folds.iter().enumerate() {
        let ckpt_name = format!("fold{f}.ckpt.json");
        let log_name = format!("fold{f}.log.csv");
        fold.checkpoint.save(&args.out_dir.join(&ckpt_name))?;
        write_log_csv(&args.out_dir.join(&log_name), &fold.log)?;
        folds.push(FoldSummary {
            fold: f,
            best_epoch: fold.checkpoint.meta.best_epoch.unwrap_or(0),
            val_auroc: fold.checkpoint.meta.val_auroc.unwrap_or(f64::NAN),
            test_auroc: fold.test_auroc.unwrap_or(f64::NAN),
            checkpoint: ckpt_name.clone(),
            log: log_name.clone(),
        });
        outputs.push(ckpt_name);
        outputs.push(log_name);
    }

    // Table-2-style subgroup AUROC on each fold's test split, aggregated
    // across folds with fixed age edges from the whole cohort.
    let ages: Vec<f64> = records.iter().map(|r| r.age).collect();
    let edges = age_quartile_edges(&ages);
    let mut per_fold_outcomes: Vec<Vec<PatientOutcome>> = Vec::new();
    for (f, fold) in cv.folds.iter().enumerate() {
        let inputs = FoldInputs::from_plan(&records, &cv.plan, f)?;
        let pre = fold
            .checkpoint
            .preprocessor
            .as_ref()
            .expect("fold checkpoints carry their preprocessor");
        let model = fold.checkpoint.to_model()?;
        let mut outcomes = Vec::with_capacity(inputs.test.len());
        for record in &inputs.test {
            let prepared = preprocess(record, &schema, pre)?;
            let traj = model.trajectory(&prepared)?;
            outcomes.push(PatientOutcome {
                patient_id: traj.patient_id.clone(),
                summary_score: traj.max_score(),
                positive: traj.positive,
                first_alarm_hour: None,
                onset_hour: record.onset_hour,
                age: record.age,
                sex: record.sex,
            });
        }
        per_fold_outcomes.push(outcomes);
    }
    let subgroups_age =
        subgroup_auroc_across_folds(&per_fold_outcomes, &Grouping::AgeEdges(edges));
    let subgroups_sex = subgroup_auroc_across_folds(&per_fold_outcomes, &Grouping::Sex);

    let summary = TrainSummary {
        schema_version: 1,
        folds,
        mean_test_auroc: cv.mean_test_auroc,
        sd_test_auroc: cv.sd_test_auroc,
        split_assignment_hash: sha256_hex(serde_json::to_string(&cv.plan)?.as_bytes()),
        subgroups_age,
        subgroups_sex,
        pretrained_fingerprint: pretrained.as_ref().map(|c| c.fingerprint()),
    };
    std::fs::write(
        args.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    outputs.push("summary.json".into());
    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!("train --seed {}", args.seed),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: args.seed,
            config_hash: config_hash(&args.config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: vec![
                ("cohort".into(), args.cohort.display().to_string()),
                ("schema".into(), args.schema.display().to_string()),
            ],
            outputs,
        },
    )?;
    Ok(summary)
}

pub struct PretrainArgs {
    pub cohort: PathBuf,
    pub schema: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    /// Study cohort the pretraining set must not overlap (optional here;
    /// always re-checked at fine-tuning time).
    pub study_cohort: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn run_pretrain(args: &PretrainArgs) -> Result<PathBuf> {
    ensure_dir(&args.out_dir)?;
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.cohort)?;
    let study_ids: Vec<String> = match &args.study_cohort {
        Some(path) => read_cohort_jsonl(path)?
            .iter()
            .map(|r| r.patient_id.clone())
            .collect(),
        None => Vec::new(),
    };
    let (ckpt, log) = pretrain_mortality(
        &records,
        &study_ids,
        &schema,
        &args.config.model,
        &args.config.train,
        args.seed,
    )?;
    let ckpt_path = args.out_dir.join("pretrained.ckpt.json");
    ckpt.save(&ckpt_path)?;
    write_log_csv(&args.out_dir.join("pretrain.log.csv"), &log)?;
    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!("pretrain --seed {}", args.seed),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: args.seed,
            config_hash: config_hash(&args.config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: vec![
                ("cohort".into(), args.cohort.display().to_string()),
                ("schema".into(), args.schema.display().to_string()),
            ],
            outputs: vec!["pretrained.ckpt.json".into(), "pretrain.log.csv".into()],
        },
    )?;
    Ok(ckpt_path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub sensitivity_target: f64,
    pub threshold: f64,
    pub operating_point: OperatingPoint,
    pub lead_time: LeadTimeSummary,
    pub subgroups_age: Vec<SubgroupResult>,
    pub subgroups_sex: Vec<SubgroupResult>,
}

pub fn write_roc_csv(path: &Path, curve: &[RocPoint]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "fpr,tpr,threshold")?;
    for p in curve {
        writeln!(file, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CshockError::Data(format!(
                "{}: line {}: expected 3 columns",
                path.display(),
                i + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            if s == "inf" {
                Ok(f64::INFINITY)
            } else {
                s.parse()
                    .map_err(|_| CshockError::Data(format!("{}: bad float {s}", path.display())))
            }
        };
        out.push(RocPoint {
            fpr: parse(parts[0])?,
            tpr: parse(parts[1])?,
            threshold: parse(parts[2])?,
        });
    }
    Ok(out)
}

fn prepare_all(
    records: &[PatientRecord],
    schema: &FeatureSchema,
    ckpt: &ModelCheckpoint,
) -> Result<(RiskModel, Vec<PreparedRecord>)> {
    if ckpt.schema_fingerprint != schema.fingerprint() {
        return Err(CshockError::Data(format!(
            "checkpoint schema fingerprint {} does not match cohort schema {}",
            ckpt.schema_fingerprint,
            schema.fingerprint()
        )));
    }
    let pre = ckpt.preprocessor.as_ref().ok_or_else(|| {
        CshockError::Data("checkpoint carries no preprocessor state".into())
    })?;
    let model = ckpt.to_model()?;
    let prepared: Vec<PreparedRecord> = records
        .iter()
        .map(|r| preprocess(r, schema, pre))
        .collect::<Result<_>>()?;
    Ok((model, prepared))
}

pub struct EvaluateArgs {
    pub cohort: PathBuf,
    pub schema: PathBuf,
    pub checkpoint: PathBuf,
    pub sensitivity: f64,
    pub out_dir: PathBuf,
}

/// Score a cohort with a trained checkpoint and emit the metrics report,
/// ROC CSV, per-hour trajectories, and subgroup tables.
pub fn run_evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    ensure_dir(&args.out_dir)?;
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.cohort)?;
    let ckpt = ModelCheckpoint::load(&args.checkpoint)?;
    let (model, prepared) = prepare_all(&records, &schema, &ckpt)?;

    let mut trajectories = Vec::with_capacity(prepared.len());
    for rec in &prepared {
        trajectories.push(model.trajectory(rec)?);
    }
    let pairs: Vec<(f64, bool)> = trajectories
        .iter()
        .map(|t| (t.max_score(), t.positive))
        .collect();
    let auc = crate::eval::auroc(&pairs)?;
    let curve = roc_curve(&pairs)?;
    let threshold = threshold_for_sensitivity(&pairs, args.sensitivity)?;
    let op = operating_point(&pairs, threshold)?;
    let policy = AlarmPolicy::at(threshold);
    let outcomes: Vec<PatientOutcome> = trajectories
        .iter()
        .zip(&prepared)
        .map(|(t, rec)| PatientOutcome {
            patient_id: t.patient_id.clone(),
            summary_score: t.max_score(),
            positive: t.positive,
            first_alarm_hour: policy.first_alarm(&t.scores),
            onset_hour: rec.onset_hour,
            age: rec.age,
            sex: rec.sex,
        })
        .collect();
    let positives: Vec<&PatientOutcome> = outcomes.iter().filter(|o| o.positive).collect();
    let lead = lead_time(&positives);
    let by_age = subgroup_auroc(&outcomes, &Grouping::AgeQuartiles);
    let by_sex = subgroup_auroc(&outcomes, &Grouping::Sex);

    let report = MetricsReport {
        schema_version: 1,
        auroc: auc,
        n_pos: pairs.iter().filter(|(_, y)| *y).count(),
        n_neg: pairs.iter().filter(|(_, y)| !*y).count(),
        sensitivity_target: args.sensitivity,
        threshold,
        operating_point: op,
        lead_time: lead,
        subgroups_age: by_age,
        subgroups_sex: by_sex,
    };
    std::fs::write(
        args.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_roc_csv(&args.out_dir.join("roc.csv"), &curve)?;
    {
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(args.out_dir.join("trajectories.csv"))?);
        writeln!(file, "patient_id,hour,score")?;
        for t in &trajectories {
            for (hour, score) in t.scores.iter().enumerate() {
                writeln!(file, "{},{},{}", t.patient_id, hour, score)?;
            }
        }
        file.flush()?;
    }
    {
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(args.out_dir.join("subgroups.csv"))?);
        writeln!(file, "grouping,group,n_pos,n_neg,auroc,absent_reason")?;
        for (grouping, rows) in [("age", &report.subgroups_age), ("sex", &report.subgroups_sex)] {
            for r in rows {
                writeln!(
                    file,
                    "{},{},{},{},{},{}",
                    grouping,
                    r.group,
                    r.n_pos,
                    r.n_neg,
                    r.auroc.map_or(String::new(), |a| a.to_string()),
                    r.absent_reason.clone().unwrap_or_default()
                )?;
            }
        }
        file.flush()?;
    }
    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!("evaluate --sensitivity {}", args.sensitivity),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: ckpt.meta.seed,
            config_hash: config_hash(&ckpt.config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: vec![
                ("cohort".into(), args.cohort.display().to_string()),
                ("schema".into(), args.schema.display().to_string()),
                ("checkpoint".into(), args.checkpoint.display().to_string()),
            ],
            outputs: vec![
                "metrics.json".into(),
                "roc.csv".into(),
                "trajectories.csv".into(),
                "subgroups.csv".into(),
            ],
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerFitConfig {
    pub surrogate: SurrogateOptions,
    pub explainer: ExplainerTrainConfig,
}

impl ExplainerFitConfig {
    pub fn desk() -> Self {
        let mut train = TrainRunConfig::desk();
        train.epochs = 10;
        Self {
            surrogate: SurrogateOptions::new(RiskModelConfig::desk(), train),
            explainer: ExplainerTrainConfig::default(),
        }
    }
}

pub struct FitExplainerArgs {
    pub cohort: PathBuf,
    pub schema: PathBuf,
    pub config: ExplainerFitConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitExplainerOutputs {
    pub surrogate: PathBuf,
    pub explainer: PathBuf,
    pub masking_rate: f64,
    pub surrogate_val_auroc: Option<f64>,
}

/// Train the masked-prediction surrogate and the amortized explainer.
pub fn run_fit_explainer(args: &FitExplainerArgs) -> Result<FitExplainerOutputs> {
    ensure_dir(&args.out_dir)?;
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.cohort)?;
    let outcome = train_surrogate(&records, &schema, &args.config.surrogate, args.seed)?;
    let surrogate_path = args.out_dir.join("surrogate.ckpt.json");
    outcome.checkpoint.save(&surrogate_path)?;
    write_log_csv(&args.out_dir.join("surrogate.log.csv"), &outcome.log)?;

    let surrogate = outcome.checkpoint.to_model()?;
    let pre = outcome
        .checkpoint
        .preprocessor
        .as_ref()
        .expect("surrogate checkpoints carry their preprocessor");
    let prepared: Vec<PreparedRecord> = records
        .iter()
        .map(|r| preprocess(r, &schema, pre))
        .collect::<Result<_>>()?;
    let explainer = train_explainer(
        &surrogate,
        &schema,
        &prepared,
        &args.config.explainer,
        child_seed(args.seed, "explainer"),
    )?;
    let explainer_path = args.out_dir.join("explainer.json");
    explainer.save(&explainer_path)?;

    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!("fit-explainer --seed {}", args.seed),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: args.seed,
            config_hash: config_hash(&args.config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: vec![
                ("cohort".into(), args.cohort.display().to_string()),
                ("schema".into(), args.schema.display().to_string()),
            ],
            outputs: vec![
                "surrogate.ckpt.json".into(),
                "surrogate.log.csv".into(),
                "explainer.json".into(),
            ],
        },
    )?;
    Ok(FitExplainerOutputs {
        surrogate: surrogate_path,
        explainer: explainer_path,
        masking_rate: outcome.masking_rate,
        surrogate_val_auroc: outcome.checkpoint.meta.val_auroc,
    })
}

pub struct ExplainArgs {
    pub cohort: PathBuf,
    pub schema: PathBuf,
    pub surrogate: PathBuf,
    pub explainer: PathBuf,
    pub topk: usize,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainOutputs {
    pub ranking: FeatureRanking,
    pub retention: Vec<(usize, f64)>,
}

/// Attribute every cohort record, rank features by mean |phi|, and emit the
/// attribution CSV, ranking JSON, and top-k retention curve.
pub fn run_explain(args: &ExplainArgs) -> Result<ExplainOutputs> {
    ensure_dir(&args.out_dir)?;
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.cohort)?;
    let ckpt = ModelCheckpoint::load(&args.surrogate)?;
    let explainer = Explainer::load(&args.explainer)?;
    if !explainer.trained {
        return Err(CshockError::Data(
            "explainer file does not contain a trained explainer".into(),
        ));
    }
    let (surrogate, prepared) = prepare_all(&records, &schema, &ckpt)?;

    let mut attributions = Vec::with_capacity(prepared.len());
    for rec in &prepared {
        attributions.push(fastshap_explain(&surrogate, &explainer, &schema, rec)?);
    }
    let ranking = rank_features(&schema, &attributions)?;
    let n = ranking.entries.len();
    let mut ks: Vec<usize> = (0..=args.topk.min(n)).collect();
    if !ks.contains(&n) {
        ks.push(n);
    }
    let retention = topk_retention_curve(&surrogate, &schema, &ranking, &prepared, &ks)?;

    {
        let mut file = std::io::BufWriter::new(std::fs::File::create(
            args.out_dir.join("attributions.csv"),
        )?);
        writeln!(file, "patient_id,feature,phi,mean_feature_value")?;
        for (pid, feature, phi, mean) in beeswarm_rows(&schema, &attributions, &records)? {
            writeln!(
                file,
                "{},{},{},{}",
                pid,
                feature,
                phi,
                mean.map_or(String::new(), |m| m.to_string())
            )?;
        }
        file.flush()?;
    }
    std::fs::write(
        args.out_dir.join("ranking.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "schema_version": 1,
            "ranking": ranking.entries,
        }))?,
    )?;
    {
        let mut file = std::io::BufWriter::new(std::fs::File::create(
            args.out_dir.join("retention.csv"),
        )?);
        writeln!(file, "k,auroc")?;
        for (k, auc) in &retention {
            writeln!(file, "{},{}", k, auc)?;
        }
        file.flush()?;
    }
    write_manifest(
        &args.out_dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: format!("explain --topk {}", args.topk),
            tool_version: TOOL_VERSION.to_string(),
            master_seed: ckpt.meta.seed,
            config_hash: config_hash(&ckpt.config),
            schema_fingerprint: Some(schema.fingerprint()),
            inputs: vec![
                ("cohort".into(), args.cohort.display().to_string()),
                ("schema".into(), args.schema.display().to_string()),
                ("surrogate".into(), args.surrogate.display().to_string()),
                ("explainer".into(), args.explainer.display().to_string()),
            ],
            outputs: vec![
                "attributions.csv".into(),
                "ranking.json".into(),
                "retention.csv".into(),
            ],
        },
    )?;
    Ok(ExplainOutputs { ranking, retention })
}

pub struct ScoreArgs {
    pub record: PathBuf,
    pub schema: PathBuf,
    pub checkpoint: PathBuf,
    pub threshold: f64,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreOutputs {
    pub patient_id: String,
    pub scores: Vec<f64>,
    pub first_alarm_hour: Option<usize>,
}

/// Score a single record (one JSONL line) and report the hourly scores plus
/// the first alarm hour at the given threshold.
pub fn run_score(args: &ScoreArgs) -> Result<ScoreOutputs> {
    let schema = load_schema(&args.schema)?;
    let records = read_cohort_jsonl(&args.record)?;
    let record = match records.len() {
        1 => &records[0],
        n => {
            return Err(CshockError::Data(format!(
                "{}: expected exactly one record, found {}",
                args.record.display(),
                n
            )))
        }
    };
    let ckpt = ModelCheckpoint::load(&args.checkpoint)?;
    let (model, prepared) = prepare_all(std::slice::from_ref(record), &schema, &ckpt)?;
    let trajectory = model.trajectory(&prepared[0])?;
    let policy = AlarmPolicy::at(args.threshold);
    let outputs = ScoreOutputs {
        patient_id: trajectory.patient_id.clone(),
        first_alarm_hour: policy.first_alarm(&trajectory.scores),
        scores: trajectory.scores,
    };
    if let Some(out_dir) = &args.out_dir {
        ensure_dir(out_dir)?;
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(out_dir.join("scores.csv"))?);
        writeln!(file, "patient_id,hour,score")?;
        for (hour, score) in outputs.scores.iter().enumerate() {
            writeln!(file, "{},{},{}", outputs.patient_id, hour, score)?;
        }
        file.flush()?;
        write_manifest(
            out_dir,
            &RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                command: format!("score --threshold {}", args.threshold),
                tool_version: TOOL_VERSION.to_string(),
                master_seed: ckpt.meta.seed,
                config_hash: config_hash(&ckpt.config),
                schema_fingerprint: Some(schema.fingerprint()),
                inputs: vec![
                    ("record".into(), args.record.display().to_string()),
                    ("schema".into(), args.schema.display().to_string()),
                    ("checkpoint".into(), args.checkpoint.display().to_string()),
                ],
                outputs: vec!["scores.csv".into()],
            },
        )?;
    }
    Ok(outputs)
}

/// Cross-check helper: the trapezoid area of an ROC CSV on disk.
pub fn roc_csv_area(path: &Path) -> Result<f64> {
    Ok(roc_area(&read_roc_csv(path)?))
}
