use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use openmatch_cli::commands::{self, split_sizes};
use openmatch_cli::spec::DEFAULT_HISTOGRAM_BINS;
use openmatch_cli::{DataSource, ExperimentSpec, SpecFile};
use openmatch_core::{Error, Result};

/// Open-set semi-supervised training on vector data.
#[derive(Parser)]
#[command(name = "openmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, metrics and a resolved spec.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on this CSV instead of the spec's dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Compare training with and without the consistency term.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec> {
    let file = SpecFile::load(path)?;
    let spec = file.resolve()?;
    Ok(match seed {
        Some(s) => spec.with_seed(s, file.data_seed.is_some()),
        None => spec,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let spec = load_spec(&config, seed)?;
            let d = commands::gen_data(&spec, &out)?;
            println!("wrote {}: {}", out.display(), split_sizes(&d));
        }
        Command::Train { config, out, seed, data } => {
            let mut spec = load_spec(&config, seed)?;
            if let Some(path) = data {
                spec.source = DataSource::Csv(path);
            }
            let out = commands::resolve_out_dir(out.as_deref(), &spec)?;
            let history = commands::train(&spec, &out)?;
            if let Some(last) = history.records.last() {
                println!("{}", last.to_line());
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, data, out, bins } => {
            let report = commands::eval(&checkpoint, &data, &out, bins)?;
            println!("{}", report.to_line());
        }
        Command::Ablate { config, out, seed } => {
            let spec = load_spec(&config, seed)?;
            let out = commands::resolve_out_dir(out.as_deref(), &spec)?;
            let rows = commands::ablate(&spec, &out)?;
            print!("{}", commands::format_ablation(&rows));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
