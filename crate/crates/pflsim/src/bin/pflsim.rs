//! Thin command-line front end over the library: run a configured
//! experiment, validate a config without running it, or summarize a
//! finished output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pflsim::config::load_config;
use pflsim::experiment::{format_dir_summary, run_experiment, summarize_dir, ExperimentOptions};
use pflsim::Error;

#[derive(Parser)]
#[command(name = "pflsim", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Shift every configured seed by this amount.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Worker threads; defaults to every core.
        #[arg(long)]
        workers: Option<usize>,
        /// Re-execute each run afterwards and fail unless the artifacts
        /// match byte for byte.
        #[arg(long)]
        check: bool,
    },
    /// Parse and validate a config, reporting problems without running.
    Validate { config: PathBuf },
    /// Print per-run and aggregate results from an output directory.
    Summarize { output_dir: PathBuf },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::SchemaVersion { .. } => 1,
        Error::Determinism(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed_offset, workers, check } => {
            let cfg = load_config(&config)?;
            let opts = ExperimentOptions { seed_offset, workers, check };
            let outcome = run_experiment(&cfg, &opts)?;
            for dir in &outcome.run_dirs {
                println!("wrote {}", dir.display());
            }
            if let Some(path) = &outcome.summary_path {
                println!("wrote {}", path.display());
            }
            if check {
                println!("determinism check passed");
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "ok: {} seeds, algorithm {}, output {}",
                cfg.seeds.len(),
                cfg.algorithm.as_str(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Summarize { output_dir } => {
            let summary = summarize_dir(&output_dir)?;
            print!("{}", format_dir_summary(&summary));
            Ok(())
        }
    }
}
