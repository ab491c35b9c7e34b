//! Command-line driver: one subcommand per pipeline stage over a shared
//! output directory. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use lesionkit::pipeline::{self, PipelineError, RunContext, StageOutcome};
use lesionkit::runcfg::{self, RunConfig};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lesionkit",
    version,
    about = "Lesion classification pipeline on multiparametric volumes"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap; 0 keeps the library default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort under the output root.
    Phantom,
    /// Resample volumes, refine lesion centers, grow masks, split cases.
    Preprocess,
    /// Extract multi-view training samples for every channel set.
    Augment,
    /// Extract the per-lesion feature table.
    Features,
    /// Train one convolutional network per channel set.
    TrainCnn,
    /// Run feature selection, then train the boosted-tree models.
    TrainGbm,
    /// Pick ensemble weights greedily from validation predictions.
    SelectEnsemble,
    /// Blend member predictions with the selected weights.
    Predict,
    /// Report validation AUCs and the ensemble operating point.
    Evaluate,
    /// Render every model's ROC curve to one SVG.
    RocPlot,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => runcfg::read_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .ok();
    }
    let ctx = RunContext::new(cfg, &cli.out)?;

    match cli.command {
        Command::Phantom => report("phantom", pipeline::stage_phantom(&ctx)?),
        Command::Preprocess => report("preprocess", pipeline::stage_preprocess(&ctx)?),
        Command::Augment => report("augment", pipeline::stage_augment(&ctx)?),
        Command::Features => report("features", pipeline::stage_features(&ctx)?),
        Command::TrainCnn => report("train-cnn", pipeline::stage_train_cnn(&ctx)?),
        Command::TrainGbm => report("train-gbm", pipeline::stage_train_gbm(&ctx)?),
        Command::SelectEnsemble => {
            report("select-ensemble", pipeline::stage_select_ensemble(&ctx)?)
        }
        Command::Predict => report("predict", pipeline::stage_predict(&ctx)?),
        Command::Evaluate => {
            report("evaluate", pipeline::stage_evaluate(&ctx)?);
            report("roc-plot", pipeline::stage_roc_plot(&ctx)?);
            print_aucs(&ctx)?;
        }
        Command::RocPlot => report("roc-plot", pipeline::stage_roc_plot(&ctx)?),
    }
    Ok(())
}

fn report(stage: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: done"),
        StageOutcome::Skipped => println!("{stage}: skipped (already complete)"),
    }
}

fn print_aucs(ctx: &RunContext) -> Result<(), PipelineError> {
    let path = ctx.out_dir.join("eval/metrics.json");
    let text = fs::read_to_string(&path)?;
    let report: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("malformed {}: {e}", path.display())))?;
    if let Some(models) = report["models"].as_object() {
        for (model_id, auc) in models {
            if let Some(v) = auc.as_f64() {
                println!("{model_id} AUC {v:.4}");
            }
        }
    }
    if let Some(v) = report["ensemble_auc"].as_f64() {
        println!("ensemble AUC {v:.4}");
    }
    Ok(())
}
