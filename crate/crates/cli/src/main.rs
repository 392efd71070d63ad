// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use lenslab_cli::commands::{
    cmd_evaluate, cmd_fit_lens, cmd_ngram_train, cmd_surprisal, cmd_validate_bundle, ngram_dir,
};
use lenslab_cli::config::{ClauseFinal, LensSelection, Overrides, RunConfig, DEFAULT_CONFIG_FILE};
use lenslab_cli::report::{cmd_correlate, cmd_report};
use lenslab_cli::toy::make_toy;
use lenslab_cli::workspace::{Workspace, WORKERS_ENV};
use lenslab_cli::{exit_code, EXIT_CONFIG_ERROR};

/// Layer-wise surprisal from transformer lenses, scored against human
/// reading measures.
#[derive(Parser)]
#[command(name = "lenslab", version, after_help = format!(
    "Worker threads default to the CPU count; set {WORKERS_ENV} to override."
))]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = DEFAULT_CONFIG_FILE)]
    config: PathBuf,
    /// Seed for every randomized step (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Restrict the clause-final analysis.
    #[arg(long, global = true, value_enum)]
    clause_final: Option<ClauseFinalArg>,
    /// Which lens to read intermediate layers with.
    #[arg(long, global = true, value_enum)]
    lens: Option<LensArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ClauseFinalArg {
    Off,
    Column,
    Punct,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LensArg {
    Logit,
    Tuned,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-layer token and word surprisal tables.
    Surprisal,
    /// Train tuned-lens translators and their KL curves.
    FitLens,
    /// Fit the ΔLL regressions for every dataset, model, lens and layer.
    Evaluate,
    /// Write all meta-analysis tables and figures.
    Report,
    /// Train and save the word bigram model.
    NgramTrain,
    /// Correlate layer surprisal with bigram and reference surprisal.
    Correlate,
    /// Write a self-contained toy fixture (models, data, config) into DIR.
    MakeToy { dir: PathBuf },
    /// Check that a model bundle loads and runs.
    ValidateBundle { dir: PathBuf },
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        lens: cli.lens.map(|l| match l {
            LensArg::Logit => LensSelection::Logit,
            LensArg::Tuned => LensSelection::Tuned,
            LensArg::Both => LensSelection::Both,
        }),
        clause_final: cli.clause_final.map(|c| match c {
            ClauseFinalArg::Off => ClauseFinal::Off,
            ClauseFinalArg::Column => ClauseFinal::Column,
            ClauseFinalArg::Punct => ClauseFinal::Punct,
        }),
    }
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeToy { dir } => {
            println!("{}", make_toy(dir)?.display());
            return Ok(());
        }
        Command::ValidateBundle { dir } => {
            let s = cmd_validate_bundle(dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            return Ok(());
        }
        _ => {}
    }
    let cfg = RunConfig::load(&cli.config, &overrides(cli))?;
    let ws = Workspace::load(cfg)?;
    match &cli.command {
        Command::Surprisal => print_paths(&cmd_surprisal(&ws)?),
        Command::FitLens => print_paths(&cmd_fit_lens(&ws)?),
        Command::Evaluate => print_paths(&cmd_evaluate(&ws)?),
        Command::Report => print_paths(&cmd_report(&ws)?),
        Command::NgramTrain => {
            cmd_ngram_train(&ws)?;
            println!("{}", ngram_dir(&ws).display());
        }
        Command::Correlate => print_paths(&cmd_correlate(&ws)?),
        Command::MakeToy { .. } | Command::ValidateBundle { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG_ERROR as u8 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
