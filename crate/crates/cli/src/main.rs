//! `protosim`: train a prototype bank, index datasets with it, compare
//! them, probe and ablate class features, render attention overlays and
//! serve the results over HTTP.
//!
//! Exit status: 0 on success, 1 on usage or validation errors (reported
//! before any work starts), 2 on runtime failures.

mod commands;

use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "protosim", version, about = "Prototype-based dataset comparison")]
struct Cli {
    /// Maximum number of worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a prototype bank with self-distillation on the union of datasets.
    Train(commands::TrainArgs),
    /// Assign every image of the given datasets with a trained checkpoint.
    Index(commands::IndexArgs),
    /// Build the comparison report (JSON and HTML) from an index.
    Compare(commands::CompareArgs),
    /// Fit a linear probe on class-token prototype embeddings.
    Probe(commands::ProbeArgs),
    /// Zero the prototypes that carry each class and re-evaluate a probe.
    Ablate(commands::AblateArgs),
    /// Render a prototype's attention overlay on one image.
    Viz(commands::VizArgs),
    /// Serve the inspection HTTP API.
    Serve(commands::ServeArgs),
    /// Query a running inspection service and print JSON.
    Query(commands::QueryArgs),
    /// Write synthetic datasets with planted concepts.
    Synth(commands::SynthArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Index(a) => commands::index(a),
        Command::Compare(a) => commands::compare(a),
        Command::Probe(a) => commands::probe(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Viz(a) => commands::viz(a),
        Command::Serve(a) => commands::serve(a, cli.workers),
        Command::Query(a) => commands::query(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `protosim --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
