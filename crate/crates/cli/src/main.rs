//! Command-line entry points. Exit codes: 0 success, 1 usage/config error,
//! then one code per pipeline stage (train-base 2, train-fine 3, baseline 4,
//! superpose 5, eval 6, analyze 7).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sptx::artifacts::{load_model, save_model, RunPaths};
use sptx::config::{ExperimentConfig, Mode};
use sptx::pipeline::{self, Stage, StageError};
use sptx_core::training::{baseline_linear_merge, baseline_task_arithmetic};

#[derive(Parser)]
#[command(name = "sptx", about = "Train, superpose and evaluate two toy transformer experts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the blending mode (1d or 2d).
    #[arg(long)]
    mode: Option<Mode>,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, self.seed, self.out.clone(), self.mode)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline (or one stage of it with --stage).
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Run a single stage: train-base, train-fine, baseline, superpose,
        /// eval or analyze.
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Train one expert: domain a from scratch, domain b from an init model.
    TrainExpert {
        #[command(flatten)]
        common: CommonArgs,
        /// Which corpus to train on (a or b).
        #[arg(long)]
        domain: String,
        /// Starting checkpoint for fine-tuning (defaults to the run's base
        /// expert when training domain b).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Build an interpolation baseline from the two expert checkpoints.
    MergeBaseline {
        #[command(flatten)]
        common: CommonArgs,
        /// linear (coefficient alpha0) or task (coefficient lambda).
        #[arg(long)]
        method: String,
        /// Override the config's baseline coefficient.
        #[arg(long)]
        coeff: Option<f64>,
    },
    /// Superposition training against the two frozen experts.
    Superpose {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate all saved models and write the report JSON.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export per-figure CSVs and raw hidden states from a saved report.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn stage_exit(err: StageError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.stage.exit_code() as u8)
}

fn config_exit(err: anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { common, stage } => {
            let cfg = match common.load() {
                Ok(cfg) => cfg,
                Err(e) => return config_exit(e),
            };
            let result = match stage {
                Some(stage) => pipeline::run_stage(&cfg, stage),
                None => pipeline::run_all(&cfg).map(|report| {
                    println!("report written to {}", RunPaths::new(&cfg.out_dir).report().display());
                    let _ = report;
                }),
            };
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => stage_exit(e),
            }
        }
        Cmd::TrainExpert { common, domain, init } => {
            let cfg = match common.load() {
                Ok(cfg) => cfg,
                Err(e) => return config_exit(e),
            };
            match domain.as_str() {
                "a" => match pipeline::run_stage(&cfg, Stage::TrainBase) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => stage_exit(e),
                },
                "b" => {
                    // An explicit init path substitutes for the run's base
                    // checkpoint.
                    if let Some(init) = init {
                        let paths = RunPaths::new(&cfg.out_dir);
                        let copy = (|| -> anyhow::Result<()> {
                            std::fs::create_dir_all(&cfg.out_dir)?;
                            let model = load_model(&init)?;
                            save_model(&paths.base(), &model)?;
                            Ok(())
                        })();
                        if let Err(e) = copy {
                            return stage_exit(StageError { stage: Stage::TrainFine, source: e });
                        }
                    }
                    match pipeline::run_stage(&cfg, Stage::TrainFine) {
                        Ok(()) => ExitCode::SUCCESS,
                        Err(e) => stage_exit(e),
                    }
                }
                other => config_exit(anyhow::anyhow!("--domain must be a or b, got {other}")),
            }
        }
        Cmd::MergeBaseline { common, method, coeff } => {
            let cfg = match common.load() {
                Ok(cfg) => cfg,
                Err(e) => return config_exit(e),
            };
            let run = (|| -> anyhow::Result<()> {
                let paths = RunPaths::new(&cfg.out_dir);
                let base = load_model(&paths.base())?;
                let fine = load_model(&paths.fine())?;
                match method.as_str() {
                    "linear" => {
                        let alpha0 = coeff.unwrap_or(cfg.baseline.alpha0);
                        let merged = baseline_linear_merge(&base, &fine, alpha0)?;
                        save_model(&paths.linear(), &merged)?;
                        println!("linear merge (alpha0={alpha0}) -> {}", paths.linear().display());
                    }
                    "task" => {
                        let lambda = coeff.unwrap_or(cfg.baseline.lambda);
                        let merged = baseline_task_arithmetic(&base, &fine, lambda)?;
                        save_model(&paths.task(), &merged)?;
                        println!("task arithmetic (lambda={lambda}) -> {}", paths.task().display());
                    }
                    other => anyhow::bail!("--method must be linear or task, got {other}"),
                }
                Ok(())
            })();
            match run {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => stage_exit(StageError { stage: Stage::Baseline, source: e }),
            }
        }
        Cmd::Superpose { common } => dispatch(common, Stage::Superpose),
        Cmd::Eval { common } => dispatch(common, Stage::Eval),
        Cmd::Analyze { common } => dispatch(common, Stage::Analyze),
    }
}

fn dispatch(common: CommonArgs, stage: Stage) -> ExitCode {
    let cfg = match common.load() {
        Ok(cfg) => cfg,
        Err(e) => return config_exit(e),
    };
    match pipeline::run_stage(&cfg, stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => stage_exit(e),
    }
}
