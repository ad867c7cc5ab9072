use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbsde_lab::cli::{self, OracleMode, SolveOptions};

/// Batch solver for BSDEs, reflected BSDEs, robust expectations and claim
/// pricing on scenario trees.
#[derive(Parser)]
#[command(name = "rbsde-lab", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments in a spec file and write CSV/JSON reports.
    Solve {
        /// JSON spec: one experiment object or {"experiments": [...]}.
        spec: PathBuf,
        /// Output directory (an experiment's own `out` field wins).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tolerance for oracle cross-checks.
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        /// Run oracle cross-checks: on, off or auto.
        #[arg(long, default_value = "auto")]
        oracle: String,
    },
    /// Parse and validate a spec file without running anything.
    Validate { spec: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Solve {
            spec,
            out,
            tolerance,
            oracle,
        } => {
            let oracle: OracleMode = match oracle.parse() {
                Ok(mode) => mode,
                Err(message) => {
                    eprintln!("{message}");
                    return ExitCode::from(2);
                }
            };
            let opts = SolveOptions { tolerance, oracle };
            match cli::solve_file(&spec, out.as_deref(), &opts) {
                Ok(written) => {
                    for path in written {
                        println!("{}", path.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { spec } => match cli::validate_file(&spec) {
            Ok(names) => {
                for name in names {
                    println!("ok: {name}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
