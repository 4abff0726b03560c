use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use xlrs_cli::config::{check, validate_config, ConfigError, ExperimentConfig};
use xlrs_cli::manifest::Stage;
use xlrs_cli::pipeline::{Experiment, PipelineError};

/// Cross-lingual representation similarity experiments on synthetic languages.
#[derive(Parser)]
#[command(name = "xlrs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the language family, parallel corpus and vocabulary.
    GenCorpus(StageArgs),
    /// Pretrain the shared encoder-decoder by span denoising.
    Pretrain(StageArgs),
    /// Fine-tune every task × source set × seed run, measuring XLRS.
    Finetune(StageArgs),
    /// Score every saved checkpoint on source and target splits.
    Diagnose(StageArgs),
    /// Run the checkpoint selection strategies and correlations.
    Select(StageArgs),
    /// Write the CSV and markdown report.
    Report(StageArgs),
    /// Run every pending stage in order.
    RunAll(StageArgs),
    /// Check a configuration and print it with defaults filled in.
    Validate(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Experiment output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue interrupted fine-tuning runs from their latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Copy the corpus and pretrained model of a compatible experiment.
    #[arg(long, value_name = "DIR")]
    pretrained_from: Option<PathBuf>,
}

enum Failure {
    Invalid(anyhow::Error),
    Stage(anyhow::Error),
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => validate_config(path).map_err(|e| Failure::Invalid(describe(e)))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let errors = check(&cfg);
    if !errors.is_empty() {
        return Err(Failure::Invalid(describe(ConfigError::Invalid(errors))));
    }
    Ok(cfg)
}

fn describe(e: ConfigError) -> anyhow::Error {
    let fields: Vec<String> = e
        .fields()
        .iter()
        .map(|f| format!("  {}: {}", f.field, f.message))
        .collect();
    if fields.is_empty() {
        anyhow::Error::new(e)
    } else {
        anyhow::anyhow!("invalid configuration:\n{}", fields.join("\n"))
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    if e.is_validation() {
        Failure::Invalid(e.into())
    } else {
        Failure::Stage(e.into())
    }
}

fn open(args: &StageArgs) -> Result<Experiment, Failure> {
    let cfg = load_config(&args.config)?;
    let mut exp =
        Experiment::open(cfg, args.config.config.as_deref(), &args.out, args.resume).map_err(pipeline_failure)?;
    if let Some(from) = &args.pretrained_from {
        exp.reuse_upstream(from).map_err(pipeline_failure)?;
    }
    Ok(exp)
}

fn run_stage(args: &StageArgs, stage: Option<Stage>) -> Result<(), Failure> {
    let mut exp = open(args)?;
    let result = match stage {
        Some(s) => exp.run_stage(s),
        None => exp.run_all(),
    };
    result.map_err(|e| {
        let out: &Path = &args.out;
        Failure::Stage(anyhow::Error::new(e).context(format!("experiment in {}", out.display())))
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenCorpus(a) => run_stage(&a, Some(Stage::GenCorpus)),
        Command::Pretrain(a) => run_stage(&a, Some(Stage::Pretrain)),
        Command::Finetune(a) => run_stage(&a, Some(Stage::Finetune)),
        Command::Diagnose(a) => run_stage(&a, Some(Stage::Diagnose)),
        Command::Select(a) => run_stage(&a, Some(Stage::Select)),
        Command::Report(a) => run_stage(&a, Some(Stage::Report)),
        Command::RunAll(a) => run_stage(&a, None),
        Command::Validate(a) => {
            let cfg = load_config(&a)?;
            let json = serde_json::to_string_pretty(&cfg)
                .context("serializing configuration")
                .map_err(Failure::Stage)?;
            println!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
