//! `looplab` — experiment harness for stable looped transformers.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 divergence halt.

mod commands;
mod runconfig;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "looplab", version, about = "Desk-scale laboratory for stable looped transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a declarative TOML config into a run directory.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint at fixed test-time depths; emits CSV.
    Eval(commands::eval::EvalArgs),
    /// Trace spectral radius and state norms across checkpoints; emits CSV.
    StabilityScan(commands::scan::ScanArgs),
    /// Fit scaling laws to JSONL records or curves; emits JSON.
    Fit(commands::fit::FitArgs),
    /// Price a training budget; emits a JSON FLOP breakdown.
    Flops(commands::flops::FlopsArgs),
    /// Token budgets per (FLOP budget, mu_rec) cell; emits CSV.
    IsoflopPlan(commands::isoflop::IsoflopArgs),
    /// Dump a depth schedule as JSONL for audit.
    SampleAudit(commands::audit::AuditArgs),
}

/// Exit code 3: the run halted on divergence (non-finite loss or a tripped
/// state-norm limit).
#[derive(Debug)]
pub struct HaltExit(pub String);

impl std::fmt::Display for HaltExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run halted: {}", self.0)
    }
}

impl std::error::Error for HaltExit {}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::StabilityScan(args) => commands::scan::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Flops(args) => commands::flops::run(args),
        Command::IsoflopPlan(args) => commands::isoflop::run(args),
        Command::SampleAudit(args) => commands::audit::run(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<HaltExit>().is_some() { 3 } else { 2 };
            std::process::exit(code);
        }
    }
}
