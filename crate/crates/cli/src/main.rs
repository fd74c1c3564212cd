// SPDX-License-Identifier: MIT OR Apache-2.0

//! `stitchkit` command-line pipeline.
//!
//! ```text
//! stitchkit <subcommand> [--config FILE] [--key=value | --key value]...
//! stitchkit validate [--config FILE] [--stage NAME]
//! ```

// `!(x >= 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod run;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::run::Run;

#[derive(Parser, Debug)]
#[command(name = "stitchkit", version, about = "Affine stitches, SAE transfer and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key=value` or `--key value`, dotted keys for stage
    /// tables (e.g. `--stitch.learning_rate=1e-3`).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict checks to one subcommand (e.g. `train-sae`).
    #[arg(long)]
    stage: Option<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted world and its datasets.
    GenSynth(RunArgs),
    /// Score candidate layers against a fixed one with SVCCA.
    SelectLayer(RunArgs),
    /// Train an affine stitch between two models' activations.
    TrainStitch(RunArgs),
    /// Train a TopK sparse autoencoder.
    TrainSae(RunArgs),
    /// Move an SAE across a stitch and evaluate it zero-shot.
    TransferSae(RunArgs),
    /// Reconstruction metrics of an SAE on a stream.
    EvalSae(RunArgs),
    /// Sparse probes on SAE features.
    Probe(RunArgs),
    /// Difference-of-means steering vector and its transfer.
    SteerVector(RunArgs),
    /// Structural/semantic labels, attribution correlation, null-space scores.
    AnalyzeFeatures(RunArgs),
    /// Frontiers, power-law fits and FLOPs to threshold.
    ScalingReport(RunArgs),
    /// List every violated constraint of a config without running anything.
    Validate(ValidateArgs),
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("STITCHKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config("STITCHKIT_THREADS", format!("expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config("STITCHKIT_THREADS", e.to_string()))
}

fn load(config: Option<PathBuf>, overrides: &[String]) -> CliResult<Config> {
    let (from_flags, pairs) = config::parse_overrides(overrides)?;
    Config::load(config.or(from_flags).as_deref(), &pairs)
}

fn run_stage(name: &str, args: RunArgs) -> CliResult<()> {
    let stage = commands::by_subcommand(name).expect("every subcommand has a stage");
    let cfg = load(args.config, &args.overrides)?;
    let mut run = Run::new(cfg, stage.subcommand, stage.table);
    let result = (stage.run)(&mut run).and_then(|()| run.finish(stage.table).map(|_| ()));
    if result.is_err() {
        run.cleanup();
    }
    result
}

fn validate(args: ValidateArgs) -> CliResult<bool> {
    let cfg = load(args.config, &args.overrides)?;
    let stages: Vec<_> = match &args.stage {
        Some(s) => vec![commands::by_subcommand(s).ok_or_else(|| CliError::config("stage", format!("unknown subcommand {s:?}")))?],
        None => commands::ALL.iter().collect(),
    };
    let issues: Vec<_> = stages.iter().flat_map(|st| (st.check)(&cfg)).collect();
    let mut stdout = std::io::stdout().lock();
    for issue in &issues {
        // A closed pipe is not an error worth reporting here.
        let _ = writeln!(stdout, "{}: {}", issue.key, issue.message);
    }
    Ok(issues.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Validate(a) => validate(a).map(|ok| if ok { 0 } else { 2 }),
        Command::GenSynth(a) => run_stage("gen-synth", a).map(|()| 0),
        Command::SelectLayer(a) => run_stage("select-layer", a).map(|()| 0),
        Command::TrainStitch(a) => run_stage("train-stitch", a).map(|()| 0),
        Command::TrainSae(a) => run_stage("train-sae", a).map(|()| 0),
        Command::TransferSae(a) => run_stage("transfer-sae", a).map(|()| 0),
        Command::EvalSae(a) => run_stage("eval-sae", a).map(|()| 0),
        Command::Probe(a) => run_stage("probe", a).map(|()| 0),
        Command::SteerVector(a) => run_stage("steer-vector", a).map(|()| 0),
        Command::AnalyzeFeatures(a) => run_stage("analyze-features", a).map(|()| 0),
        Command::ScalingReport(a) => run_stage("scaling-report", a).map(|()| 0),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
