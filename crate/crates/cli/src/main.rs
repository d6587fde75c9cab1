use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msa_cli::commands::{cmd_diagnose, cmd_eval, cmd_train, CliError};
use msa_core::data::Split;

#[derive(Parser)]
#[command(
    name = "msa",
    version,
    about = "Train and inspect discrete-weight networks with successive approximations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.csv, metrics.json, weights.msaw and config.resolved.json.
    Train { config: PathBuf },
    /// Print the objective and error rate of saved weights as JSON.
    Eval {
        config: PathBuf,
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write maximum-principle residuals and error-estimate terms to diagnose.json.
    Diagnose {
        config: PathBuf,
        weights: PathBuf,
        /// Random neighbours to compare against.
        #[arg(long, default_value_t = 10)]
        perturbations: usize,
        /// Training samples forming the batch.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            cmd_train(&config)?;
        }
        Command::Eval {
            config,
            weights,
            split,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            print_json(&cmd_eval(&config, &weights, split)?);
        }
        Command::Diagnose {
            config,
            weights,
            perturbations,
            samples,
        } => {
            let (report, path) = cmd_diagnose(&config, &weights, perturbations, samples)?;
            print_json(&report);
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    // Typically a closed pipe (`| head`); the diagnose report is also on disk.
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
