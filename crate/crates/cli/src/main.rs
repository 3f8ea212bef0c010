use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use vbsde_cli::commands::Subcommand;
use vbsde_cli::{execute, EXIT_CONFIG};

/// Environment variable read when `--threads` is absent.
const THREADS_ENV: &str = "VBSDE_THREADS";

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Variance,
    Simulate,
    SolvePde,
    SolveBsde,
    Verify,
    Compare,
    Certify,
}

impl From<Cmd> for Subcommand {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Variance => Subcommand::Variance,
            Cmd::Simulate => Subcommand::Simulate,
            Cmd::SolvePde => Subcommand::SolvePde,
            Cmd::SolveBsde => Subcommand::SolveBsde,
            Cmd::Verify => Subcommand::Verify,
            Cmd::Compare => Subcommand::Compare,
            Cmd::Certify => Subcommand::Certify,
        }
    }
}

/// Variance curves, path simulation, PDE and BSDE solvers for Gaussian
/// Volterra noise.
///
/// Exit status: 0 all checks passed, 1 a check or precondition failed,
/// 2 configuration error.
#[derive(Debug, Parser)]
#[command(name = "vbsde", version)]
struct Args {
    #[arg(value_enum)]
    subcommand: Cmd,
    /// Experiment configuration (sectioned key = value).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides `[mc] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: $VBSDE_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let threads = match args.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) => Some(n),
                Err(_) => {
                    eprintln!("error: {THREADS_ENV}={v} is not a thread count");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            },
            Err(_) => None,
        },
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let name = args.config.display().to_string();
    let code = execute(args.subcommand.into(), &text, &name, &args.out, args.seed);
    ExitCode::from(code as u8)
}
