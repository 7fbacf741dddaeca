use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde_json::json;

use looplab_core::flops::{effective_params, training_flops};

use super::write_output;
use crate::runconfig::RunConfig;

#[derive(Args)]
pub struct FlopsArgs {
    /// Run config providing the model shape and defaults.
    #[arg(long)]
    config: PathBuf,
    /// Training tokens to price.
    #[arg(long)]
    tokens: f64,
    /// Defaults to the config's mu_rec.
    #[arg(long)]
    mu_rec: Option<u32>,
    /// Defaults to ceil(mu_rec / 2).
    #[arg(long)]
    mu_bwd: Option<u32>,
    /// Defaults to the config's seq_len.
    #[arg(long)]
    seq_len: Option<usize>,
    /// JSON output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: FlopsArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let mu_rec = args.mu_rec.unwrap_or(cfg.train.mu_rec);
    let mu_bwd = args
        .mu_bwd
        .or(cfg.train.mu_bwd)
        .unwrap_or_else(|| looplab_core::sampling::mu_bwd_rule(mu_rec));
    let seq_len = args.seq_len.unwrap_or(cfg.train.seq_len);
    let budget = training_flops(&cfg.train.model, mu_rec, mu_bwd, args.tokens, seq_len);
    let params = effective_params(&cfg.train.model, mu_rec);
    let payload = json!({
        "mu_rec": mu_rec,
        "mu_bwd": mu_bwd,
        "seq_len": seq_len,
        "effective_params": params,
        "budget": budget,
    });
    write_output(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&payload)?))
}
