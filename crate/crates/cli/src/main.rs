//! `bxl1`: attacks, evaluation, adversarial training and oracle checks for
//! the l1 threat model `B1(x, eps) ∩ [0, 1]^d`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O or file-format error,
//! 3 invariant violation or failed oracle check.

mod attack;
mod config;
mod error;
mod eval;
mod output;
mod source;
mod tables;
mod train;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigFile, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "bxl1",
    version,
    about = "Exact l1 adversarial attacks and their verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one attack over a dataset; per-example and per-iteration CSVs.
    Attack,
    /// Clean and robust accuracy per (model, attack).
    Eval,
    /// Adversarial training with a robustness probe.
    Train,
    /// Check the projection, steepest step, sparsity formula and gradients
    /// against independent oracles.
    Verify {
        /// Perturb the projection multiplier; the checks must then fail.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Expected sparsity of the steepest step for a grid of radii and dimensions.
    Sparsity,
    /// Projection timing.
    Bench,
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("BXL1_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                CliError::Config(format!("BXL1_THREADS = {v:?} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::Config("thread count must be positive".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.flags.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let file = ConfigFile::load(cli.flags.config.as_deref())?;
    let flags = &cli.flags;
    match cli.command {
        Command::Attack => {
            let cfg = file.attack.unwrap_or_default().resolve(flags)?;
            let s = attack::run(&cfg)?;
            println!(
                "clean accuracy {:.4}, robust accuracy {:.4}; wrote {}",
                s.clean_accuracy,
                s.robust_accuracy,
                cfg.out.display()
            );
        }
        Command::Eval => {
            let cfg = file.eval.unwrap_or_default().resolve(flags)?;
            for r in eval::run(&cfg)? {
                println!(
                    "{} {}: clean {:.4}, robust {:.4}",
                    r.model, r.attack, r.clean_accuracy, r.robust_accuracy
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Train => {
            let cfg = file.train.unwrap_or_default().resolve(flags)?;
            let s = train::run(&cfg)?;
            for p in &s.probe {
                println!(
                    "epoch {:>3} {:<5} {:<8} robust {:.4}",
                    p.epoch,
                    p.split,
                    p.attack.name(),
                    p.robust_accuracy
                );
            }
            println!(
                "final clean accuracy {:.4}; wrote {}",
                s.clean_accuracy,
                cfg.out.display()
            );
        }
        Command::Verify { inject_bug } => {
            let cfg = file.verify.unwrap_or_default().resolve(flags)?;
            verify::run(&cfg, inject_bug)?;
        }
        Command::Sparsity => {
            let cfg = file.sparsity.unwrap_or_default().resolve(flags)?;
            tables::sparsity(&cfg)?;
        }
        Command::Bench => {
            let cfg = file.bench.unwrap_or_default().resolve(flags)?;
            tables::bench(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bxl1: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
