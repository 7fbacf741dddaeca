use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};

use looplab_core::sampling::{mu_bwd_rule, DepthDistribution, DepthSchedule};

use super::write_output;

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Poisson,
    PoissonLognormal,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Corrected,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerSequence,
    PerMicroBatch,
}

#[derive(Args)]
pub struct AuditArgs {
    #[arg(long)]
    mu_rec: u32,
    /// Defaults to ceil(mu_rec / 2).
    #[arg(long)]
    mu_bwd: Option<u32>,
    #[arg(long, value_enum, default_value = "poisson")]
    dist: DistArg,
    #[arg(long, value_enum, default_value = "corrected")]
    sampler: SamplerArg,
    #[arg(long, value_enum, default_value = "per-sequence")]
    sampling: ModeArg,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lognormal spread for the poisson-lognormal kind.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// JSONL output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: AuditArgs) -> Result<()> {
    let dist = match args.dist {
        DistArg::Poisson => DepthDistribution::Poisson,
        DistArg::PoissonLognormal => DepthDistribution::PoissonLognormal { sigma: args.sigma },
    };
    let mu_bwd = args.mu_bwd.unwrap_or_else(|| mu_bwd_rule(args.mu_rec));
    let schedule = match (args.sampler, args.sampling) {
        (SamplerArg::Corrected, ModeArg::PerSequence) => {
            DepthSchedule::per_sequence(args.batch, args.mu_rec, mu_bwd, dist, args.seed)
        }
        (SamplerArg::Corrected, ModeArg::PerMicroBatch) => {
            DepthSchedule::per_micro_batch(args.batch, args.mu_rec, mu_bwd, dist, args.seed)
        }
        (SamplerArg::Baseline, ModeArg::PerSequence) => {
            DepthSchedule::per_sequence_baseline(args.batch, args.mu_rec, mu_bwd, dist, args.seed)?
        }
        (SamplerArg::Baseline, ModeArg::PerMicroBatch) => {
            let mut s = DepthSchedule::per_sequence_baseline(1, args.mu_rec, mu_bwd, dist, args.seed)?;
            let entry = s.entries[0];
            s.entries = (0..args.batch).map(|_| entry).collect();
            s
        }
    };
    write_output(args.out.as_deref(), &schedule.to_jsonl())
}
