use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cllmr_cli::config::{parse_config, ExperimentConfig};
use cllmr_cli::pipeline::{Pipeline, Stage, StageStatus};

/// Spectrum-conditioned recommender experiments, one stage at a time.
#[derive(Debug, Parser)]
#[command(name = "cllmr", version, arg_required_else_help = true)]
struct Cli {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Artifact directory; overrides the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides the configured one.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Rerun stages whose artifacts are already current.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Builds the train/val/test splits plus item metadata and reviews.
    PrepareData,
    /// Writes item and user profiles through the configured provider.
    GenerateProfiles,
    /// Turns profiles into side-embedding tables.
    EmbedProfiles,
    /// Factorizes the training interactions into spectral conditioners.
    BuildSpectrum,
    /// Fits the model and saves a checkpoint.
    Train,
    /// Ranks the test split and writes the metric reports.
    Evaluate {
        /// Correction strength; overrides the configured one.
        #[arg(long, value_name = "FLOAT")]
        alpha: Option<f64>,
    },
    /// Trains and scores the method variants.
    Ablate {
        /// One variant to run; all of them when omitted.
        #[arg(long, value_name = "NAME")]
        variant: Option<String>,
    },
    /// Writes spectral diagnostics of the trained representations.
    Diagnose,
    /// Retrains over the rank and noise grids and collects the reports.
    Sweep,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Command::Evaluate { alpha: Some(alpha) } = &cli.command {
        config.inference.alpha = *alpha;
    }
    let out = cli
        .out
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    let pipeline = Pipeline::new(config, out, cli.force)?;

    let (stage, status) = match &cli.command {
        Command::PrepareData => (Stage::PrepareData, pipeline.run(Stage::PrepareData)?),
        Command::GenerateProfiles => {
            (Stage::GenerateProfiles, pipeline.run(Stage::GenerateProfiles)?)
        }
        Command::EmbedProfiles => (Stage::EmbedProfiles, pipeline.run(Stage::EmbedProfiles)?),
        Command::BuildSpectrum => (Stage::BuildSpectrum, pipeline.run(Stage::BuildSpectrum)?),
        Command::Train => (Stage::Train, pipeline.run(Stage::Train)?),
        Command::Evaluate { .. } => (Stage::Evaluate, pipeline.run(Stage::Evaluate)?),
        Command::Ablate { variant: Some(name) } => {
            (Stage::Ablate, pipeline.run_variant(name.parse()?)?)
        }
        Command::Ablate { variant: None } => (Stage::Ablate, pipeline.run(Stage::Ablate)?),
        Command::Diagnose => (Stage::Diagnose, pipeline.run(Stage::Diagnose)?),
        Command::Sweep => (Stage::Sweep, pipeline.run(Stage::Sweep)?),
    };
    match status {
        StageStatus::Ran => {
            println!("{stage}: wrote {}", pipeline.out().join(stage.dir()).display())
        }
        StageStatus::Skipped => println!("{stage}: up to date, skipped (--force reruns)"),
    }
    Ok(())
}
