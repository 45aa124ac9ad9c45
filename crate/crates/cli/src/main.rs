use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fkdv_cli::{execute, Command, Options};

/// Pseudo-spectral fKdV runs, Stein-derivative evaluations, commutator
/// probes and the validation experiments.
#[derive(Parser)]
#[command(name = "fkdv", version)]
struct Cli {
    /// Sectioned key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one entry: `section.key=value` (`key=value` means [run]). Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for random initial data and probe ensembles.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides [output] out_dir and $FKDV_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Evolve the initial condition and write diagnostics and fields.
    Simulate,
    /// Evaluate the Stein derivative of the [stein] target.
    Stein,
    /// Commutator ensemble at n and 2n.
    Probe,
    /// Run one named experiment and write report.csv.
    Experiment {
        /// conservation, moment-law, tstar, two-time-bh, decay-threshold,
        /// symmetry, wave-breaking, richardson, picard or determinism
        name: String,
    },
    /// Richardson order, Picard agreement and determinism.
    Convergence,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Sub::Simulate => Command::Simulate,
        Sub::Stein => Command::Stein,
        Sub::Probe => Command::Probe,
        Sub::Experiment { name } => Command::Experiment(name),
        Sub::Convergence => Command::Convergence,
    };
    let opts = Options { config: cli.config, set: cli.set, seed: cli.seed, out: cli.out };
    match execute(&cmd, &opts) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("output: {}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("fkdv: error: {e}");
            ExitCode::from(1)
        }
    }
}
