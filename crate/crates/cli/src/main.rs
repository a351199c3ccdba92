//! `rawbench`: generate the synthetic dataset, train the classifier
//! variants, benchmark the pipelines, and render reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod provenance;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{bench, gen, report, train};

#[derive(Parser)]
#[command(
    name = "rawbench",
    version,
    about = "RAW vs RGB image classification benchmark",
    after_help = "Defaults follow the experiment configuration: learning rate 0.001, \
weight decay 0.0001, momentum 0.9 (batch size scaled to 32 for CPU), 70/20/10 dataset \
splits, 40x40 samples, and 50 timed runs after 5 warmup runs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or refresh) the paired RAW/RGB dataset.
    Gen(gen::GenArgs),
    /// Train one pipeline variant, optionally over several seeds.
    Train(train::TrainArgs),
    /// Measure conversion, classification and total times for all variants.
    Bench(bench::BenchArgs),
    /// Render accuracy/timing summaries (markdown + SVG) from a run dir.
    Report(report::ReportArgs),
}

/// Error carrying its process exit code.
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn data(source: impl Into<anyhow::Error>) -> CliError {
        CliError {
            code: 2,
            source: source.into(),
        }
    }

    pub fn numeric(source: impl Into<anyhow::Error>) -> CliError {
        CliError {
            code: 3,
            source: source.into(),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not usage errors.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => gen::run(args),
        Command::Train(args) => train::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Report(args) => report::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
