use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use looplab_core::flops::{tokens_for_budget, training_flops};
use looplab_core::sampling::mu_bwd_rule;

use super::{parse_list, write_output};
use crate::runconfig::RunConfig;

#[derive(Args)]
pub struct IsoflopArgs {
    /// Run config providing the model shape and sequence length.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated FLOP budgets, e.g. 1e15,4e15,1.6e16.
    #[arg(long)]
    budgets: String,
    /// Comma-separated mean recurrences, e.g. 2,4,6,8.
    #[arg(long)]
    mu_recs: String,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: IsoflopArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let budgets: Vec<f64> = parse_list(&args.budgets)?;
    let mu_recs: Vec<u32> = parse_list(&args.mu_recs)?;
    let seq_len = cfg.train.seq_len;

    let mut csv = String::from("budget,mu_rec,mu_bwd,tokens,repriced\n");
    for &budget in &budgets {
        for &mu_rec in &mu_recs {
            let mu_bwd = mu_bwd_rule(mu_rec);
            let tokens = tokens_for_budget(&cfg.train.model, mu_rec, mu_bwd, budget, seq_len);
            let repriced = training_flops(&cfg.train.model, mu_rec, mu_bwd, tokens, seq_len).total;
            csv.push_str(&format!("{budget},{mu_rec},{mu_bwd},{tokens},{repriced}\n"));
        }
    }
    write_output(args.out.as_deref(), &csv)
}
