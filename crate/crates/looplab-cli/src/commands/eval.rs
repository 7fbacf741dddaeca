use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use looplab_core::checkpoint;
use looplab_core::corpus::Corpus;
use looplab_core::fit::{TestTimeCurve, TtcPoint};
use looplab_core::flops;
use looplab_core::trainer::{evaluate, EvalSettings};

use super::{parse_list, write_output};

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated test-time depths, e.g. 1,2,4,8,16.
    #[arg(long)]
    depths: String,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batches: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also append a TestTimeCurve JSONL row here (needs --mu-rec/--tokens).
    #[arg(long)]
    curve_out: Option<PathBuf>,
    /// Training-time mean recurrence, for curve records.
    #[arg(long)]
    mu_rec: Option<u32>,
    /// Training tokens, for curve records.
    #[arg(long)]
    tokens: Option<f64>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let (model, _meta) = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let bytes = std::fs::read(&args.corpus)
        .with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    let corpus = Corpus::from_bytes(&bytes);

    let raw: Vec<u32> = parse_list(&args.depths)?;
    let mut depths = Vec::new();
    for d in raw {
        if !depths.contains(&d) {
            depths.push(d);
        }
    }

    let settings = EvalSettings { batches: args.batches, seq_len: args.seq_len, seed: args.seed };
    let mut csv = String::from("t,loss\n");
    let mut points = Vec::new();
    for &t in &depths {
        let loss = evaluate(&model, corpus.view(), t, &settings)?;
        csv.push_str(&format!("{t},{loss}\n"));
        points.push(TtcPoint { t, loss });
    }
    write_output(args.out.as_deref(), &csv)?;

    if let Some(curve_path) = args.curve_out {
        let (mu_rec, tokens) = match (args.mu_rec, args.tokens) {
            (Some(m), Some(t)) => (m, t),
            _ => anyhow::bail!("--curve-out needs --mu-rec and --tokens"),
        };
        points.sort_by_key(|p| p.t);
        let curve = TestTimeCurve {
            mu_rec,
            tokens,
            n_effective: Some(flops::effective_params(model.config(), mu_rec).n_effective as f64),
            points,
        };
        let mut line = serde_json::to_string(&curve)?;
        line.push('\n');
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&curve_path)?;
        f.write_all(line.as_bytes())?;
    }
    Ok(())
}
