use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use looplab_core::checkpoint;
use looplab_core::corpus::Corpus;
use looplab_core::dynamics::classify;
use looplab_core::model::Model;
use looplab_core::trainer::injection_rho;

use super::write_output;

#[derive(Args)]
pub struct ScanArgs {
    /// Single checkpoint to scan.
    #[arg(long, conflicts_with = "dir")]
    checkpoint: Option<PathBuf>,
    /// Directory of checkpoints (*.ckpt), scanned in name order.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional corpus for the state-norm probe; synthetic tokens otherwise.
    #[arg(long)]
    probe_corpus: Option<PathBuf>,
    /// Depth of the state-norm probe forward.
    #[arg(long, default_value_t = 8)]
    probe_depth: u32,
    #[arg(long, default_value_t = 32)]
    probe_len: usize,
}

pub fn run(args: ScanArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    if let Some(f) = args.checkpoint {
        files.push(f);
    } else if let Some(dir) = &args.dir {
        if dir.exists() {
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "ckpt") {
                    files.push(path);
                }
            }
            files.sort();
        }
    } else {
        anyhow::bail!("stability-scan needs --checkpoint or --dir");
    }

    let probe_tokens: Option<Vec<usize>> = match &args.probe_corpus {
        Some(path) => {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let corpus = Corpus::from_bytes(&bytes);
            let view = corpus.view();
            let (input, _) = view.window(0, args.probe_len.min(view.len().saturating_sub(2)))?;
            Some(input)
        }
        None => None,
    };

    let mut csv = String::from("step,rho,regime,max_state_norm\n");
    for file in &files {
        let (model, meta) =
            checkpoint::load(file).with_context(|| format!("loading {}", file.display()))?;
        let rho = injection_rho(&model);
        let regime = classify(rho).map(|r| r.to_string()).unwrap_or_else(|_| "undefined".into());
        let max_norm = probe_max_norm(&model, probe_tokens.as_deref(), args.probe_depth)?;
        csv.push_str(&format!("{},{},{},{}\n", meta.step, rho, regime, max_norm));
    }
    write_output(args.out.as_deref(), &csv)
}

/// Max ||h_t|| over a short probe forward; the probe degrades to NaN when the
/// forward itself overflows, which is itself a divergence signal.
fn probe_max_norm(model: &Model, tokens: Option<&[usize]>, depth: u32) -> Result<f64> {
    let fallback: Vec<usize>;
    let tokens = match tokens {
        Some(t) => t,
        None => {
            // Deterministic synthetic bytes keep the probe self-contained.
            fallback = (0..32).map(|i| (i * 37 + 11) % 256).collect();
            &fallback
        }
    };
    match model.forward_seeded(tokens, depth, 0x9c0b) {
        Ok(out) => Ok(out.loop_state.state_norms.iter().cloned().fold(0.0, f64::max)),
        Err(_) => Ok(f64::INFINITY),
    }
}
