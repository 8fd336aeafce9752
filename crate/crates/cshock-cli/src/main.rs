//! `cshock` command line: synthetic cohorts, rule-based adjudication,
//! cross-validated training with optional mortality pretraining, evaluation,
//! Shapley explanation, and single-record scoring.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cshock::pipeline::{
    run_adjudicate, run_evaluate, run_explain, run_fit_explainer, run_generate, run_pretrain,
    run_score, run_train, EvaluateArgs, ExplainArgs, ExplainerFitConfig, FitExplainerArgs,
    GenerateArgs, PretrainArgs, RunConfig, SchemaKind, ScoreArgs, TrainArgs,
};
use cshock::CshockError;

#[derive(Parser)]
#[command(name = "cshock", version, about = "Hourly ICU risk scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("CSHOCK_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Args)]
struct ConfigFlags {
    /// Settings preset: desk (laptop-scale) or full (64 channels, 50 epochs, batch 256).
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    preset: String,
    /// JSON config file overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig, CshockError> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(match self.preset.as_str() {
                "full" => RunConfig::full_scale(),
                _ => RunConfig::desk(),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with ground-truth labels and raw streams.
    Generate {
        #[arg(long, default_value_t = 1500)]
        size: usize,
        #[arg(long = "positive-rate", default_value_t = 0.136)]
        positive_rate: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Feature catalog: full (194 features) or reduced (70 features).
        #[arg(long, default_value = "full", value_parser = ["full", "reduced"])]
        schema: String,
        /// Fraction of patients given a deliberate exclusion violation.
        #[arg(long = "excludable-fraction", default_value_t = 0.0)]
        excludable_fraction: f64,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Apply the shock-onset rules to a raw streams CSV.
    Adjudicate {
        #[arg(long)]
        streams: PathBuf,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// 4-fold cross-validated training on a cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Checkpoint from `pretrain` to initialize from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Cross-validation folds; the rotation scheme fixes this at 4.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(4..=4))]
        folds: u64,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Pretrain on in-hospital mortality for later fine-tuning.
    Pretrain {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Study cohort that must stay disjoint from the pretraining set.
        #[arg(long = "study-cohort")]
        study_cohort: Option<PathBuf>,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Score a cohort with a checkpoint and write the metrics report.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sensitivity target for the alarm threshold.
        #[arg(long, default_value_t = 0.8)]
        sensitivity: f64,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Train the masked-prediction surrogate and the amortized explainer.
    FitExplainer {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// JSON file with surrogate/explainer settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Shapley attributions, feature ranking, and top-k retention curve.
    Explain {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        explainer: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_os_t = default_out_dir())]
        out: PathBuf,
    },
    /// Hourly scores and the first alarm hour for one record.
    Score {
        /// Single-record JSONL file (same shape as cohort lines).
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Optional output directory; scores always print to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(command: Command) -> Result<(), CshockError> {
    match command {
        Command::Generate {
            size,
            positive_rate,
            seed,
            schema,
            excludable_fraction,
            out,
        } => {
            let outputs = run_generate(&GenerateArgs {
                size,
                positive_rate,
                seed,
                schema: if schema == "reduced" {
                    SchemaKind::Reduced
                } else {
                    SchemaKind::Full
                },
                excludable_fraction,
                out_dir: out,
            })?;
            eprintln!(
                "generated {} retained patients ({} cardiogenic/mixed) -> {}",
                outputs.retained,
                outputs.positives,
                outputs.cohort.display()
            );
        }
        Command::Adjudicate { streams, out } => {
            let results = run_adjudicate(&streams, &out)?;
            let shocks = results.iter().filter(|r| r.onset_hour.is_some()).count();
            eprintln!("adjudicated {} patients, {} with shock", results.len(), shocks);
        }
        Command::Train {
            cohort,
            schema,
            config,
            seed,
            pretrained,
            folds: _,
            out,
        } => {
            let summary = run_train(&TrainArgs {
                cohort,
                schema,
                config: config.resolve()?,
                seed,
                pretrained,
                out_dir: out,
            })?;
            for f in &summary.folds {
                eprintln!(
                    "fold {}: val AUROC {:.4} (epoch {}), test AUROC {:.4}",
                    f.fold, f.val_auroc, f.best_epoch, f.test_auroc
                );
            }
            println!(
                "mean test AUROC {:.4} +- {:.4}",
                summary.mean_test_auroc, summary.sd_test_auroc
            );
        }
        Command::Pretrain {
            cohort,
            schema,
            config,
            seed,
            study_cohort,
            out,
        } => {
            let path = run_pretrain(&PretrainArgs {
                cohort,
                schema,
                config: config.resolve()?,
                seed,
                study_cohort,
                out_dir: out,
            })?;
            eprintln!("pretrained checkpoint -> {}", path.display());
        }
        Command::Evaluate {
            cohort,
            schema,
            checkpoint,
            sensitivity,
            out,
        } => {
            let report = run_evaluate(&EvaluateArgs {
                cohort,
                schema,
                checkpoint,
                sensitivity,
                out_dir: out,
            })?;
            println!(
                "AUROC {:.4} ({} pos / {} neg); threshold {:.4} at sensitivity {:.2}",
                report.auroc, report.n_pos, report.n_neg, report.threshold, sensitivity
            );
            if let Some(mean) = report.lead_time.mean_hours {
                println!(
                    "mean lead time {:.1} h over {} detected ({} missed)",
                    mean, report.lead_time.detected, report.lead_time.missed
                );
            }
        }
        Command::FitExplainer {
            cohort,
            schema,
            config,
            seed,
            out,
        } => {
            let fit_config = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
                    serde_json::from_str(&text)
                        .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?
                }
                None => ExplainerFitConfig::desk(),
            };
            let outputs = run_fit_explainer(&FitExplainerArgs {
                cohort,
                schema,
                config: fit_config,
                seed,
                out_dir: out,
            })?;
            eprintln!(
                "surrogate val AUROC {:?}, masking rate {:.3}",
                outputs.surrogate_val_auroc, outputs.masking_rate
            );
            eprintln!(
                "wrote {} and {}",
                outputs.surrogate.display(),
                outputs.explainer.display()
            );
        }
        Command::Explain {
            cohort,
            schema,
            surrogate,
            explainer,
            topk,
            out,
        } => {
            let outputs = run_explain(&ExplainArgs {
                cohort,
                schema,
                surrogate,
                explainer,
                topk,
                out_dir: out,
            })?;
            println!("top features by mean |phi|:");
            for (name, importance) in outputs.ranking.entries.iter().take(topk) {
                println!("  {name}: {importance:.5}");
            }
        }
        Command::Score {
            record,
            schema,
            checkpoint,
            threshold,
            out,
        } => {
            let outputs = run_score(&ScoreArgs {
                record,
                schema,
                checkpoint,
                threshold,
                out_dir: out,
            })?;
            println!("patient_id,hour,score");
            for (hour, score) in outputs.scores.iter().enumerate() {
                println!("{},{},{}", outputs.patient_id, hour, score);
            }
            match outputs.first_alarm_hour {
                Some(h) => println!("first alarm at hour {h} (threshold {threshold})"),
                None => println!("no alarm (threshold {threshold})"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Version/help requests are successes; everything else is usage.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let start = Instant::now();
    match dispatch(cli.command) {
        Ok(()) => {
            eprintln!("done in {:.2?}", start.elapsed());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
