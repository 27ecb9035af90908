use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use umt_cli::commands;
use umt_cli::config::{ExperimentConfig, Profile, OUT_DIR_ENV};
use umt_core::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "umt",
    version,
    about = "Unsupervised task design and meta-training on synthetic data",
    after_help = "Configuration: defaults come from --profile, then the \
                  UMT_OUT_DIR environment variable, then --config (a key = \
                  value file), then the remaining flags, in that order."
)]
struct Cli {
    /// Key = value config file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in size preset: desk (benchmark scale) or smoke (seconds).
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override (default: $UMT_OUT_DIR or ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labelled, group-split synthetic dataset.
    Generate,
    /// Deep-cluster the training split and checkpoint the selected model.
    Cluster,
    /// Enumerate the binary task catalog for the configured K.
    DesignTasks,
    /// Meta-train over the task catalog and checkpoint the meta model.
    MetaTrain,
    /// Fine-tune the meta model on the low-shot downstream task.
    Finetune,
    /// Run the baseline matrix and write the results table.
    Evaluate,
    /// Full pipeline: generate, cluster, design, meta-train, tune, evaluate.
    Benchmark,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::with_profile(Profile::parse(&cli.profile)?);
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        config.out_dir = PathBuf::from(dir);
    }
    if let Some(path) = &cli.config {
        config = ExperimentConfig::load(path, config)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<String> {
    let config = build_config(cli)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&config),
        Command::Cluster => commands::cmd_cluster(&config),
        Command::DesignTasks => commands::cmd_design_tasks(&config),
        Command::MetaTrain => commands::cmd_meta_train(&config),
        Command::Finetune => commands::cmd_finetune(&config),
        Command::Evaluate => commands::cmd_evaluate(&config),
        Command::Benchmark => commands::cmd_benchmark(&config),
    }
}

fn error_kind(error: &Error) -> (&'static str, u8) {
    match error {
        Error::InvalidArgument(_) => ("invalid-argument", 2),
        Error::Parse { .. } => ("parse", 2),
        Error::Io(_) => ("io", 2),
        Error::Shape(_) => ("shape", 1),
        Error::Diverged(_) => ("diverged", 1),
        Error::Capability(_) => ("capability", 1),
        Error::EmptyClass(_) => ("empty-class", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(error) => {
            let (kind, code) = error_kind(&error);
            eprintln!("umt: error[{kind}]: {error}");
            ExitCode::from(code)
        }
    }
}
