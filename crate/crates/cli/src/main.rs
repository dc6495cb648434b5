//! `ifir`: corpus synthesis, training, and evaluation for
//! instruction-following retrieval.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

mod commands;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ifir", version, about = "Instruction-following retrieval toolkit")]
struct Cli {
    /// Emit structured JSON-lines logs on stderr.
    #[arg(long, global = true)]
    log_json: bool,

    /// Log filter, e.g. `info` or `ifir_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthesis pipeline over seed pairs.
    Synth(commands::SynthArgs),
    /// Print corpus statistics.
    Stats(commands::StatsArgs),
    /// Flatten a corpus into training tuples and text tables.
    Flatten(commands::FlattenArgs),
    /// Train the fusion head on a corpus.
    Train(commands::TrainArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(commands::GradCheckArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(commands::EvalArgs),
    /// Corpus diagnostics: aps, ingf, kappa, overlap, export.
    #[command(subcommand)]
    Analyze(commands::AnalyzeCmd),
    /// Render a previously computed metric report.
    Report(commands::ReportArgs),
}

fn init_logging(cli: &Cli) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| EnvFilter::new("info"));
    if cli.log_json {
        tracing_subscriber::fmt()
            .json()
            .with_env_filter(filter)
            .with_writer(std::io::stderr)
            .init();
    } else {
        tracing_subscriber::fmt()
            .with_env_filter(filter)
            .with_writer(std::io::stderr)
            .init();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    let result = match cli.command {
        Command::Synth(args) => commands::run_synth(args),
        Command::Stats(args) => commands::run_stats(args),
        Command::Flatten(args) => commands::run_flatten(args),
        Command::Train(args) => commands::run_train(args),
        Command::GradCheck(args) => commands::run_grad_check(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Analyze(cmd) => commands::run_analyze(cmd),
        Command::Report(args) => commands::run_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
