use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};

use looplab_core::checkpoint;
use looplab_core::corpus::Corpus;
use looplab_core::trainer::{run_training, EvalRecord, MetricRecord, RunEvent};

use crate::runconfig::{self, RunConfig};
use crate::HaltExit;

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run-root directory (falls back to $LOOPLAB_RUN_ROOT, then ./runs).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Override the run name from the config.
    #[arg(long)]
    run_name: Option<String>,
}

/// Metrics-file line: train and eval records share one JSONL stream.
#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogLine<'a> {
    Train(&'a MetricRecord),
    Eval(&'a EvalRecord),
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.train.validate().context("invalid train config")?;

    // Read the corpus before touching the filesystem so a bad path leaves
    // no partial run directory behind.
    let corpus_bytes = std::fs::read(&cfg.corpus)
        .with_context(|| format!("reading corpus {}", cfg.corpus.display()))?;
    let corpus = Corpus::from_bytes(&corpus_bytes);

    let name = match args.run_name.or_else(|| cfg.run_name.clone()) {
        Some(n) => n,
        None => cfg.derived_name()?,
    };
    let root = runconfig::run_root(args.run_dir);
    std::fs::create_dir_all(&root)?;
    let dir = runconfig::create_run_dir(&root, &name)?;

    std::fs::write(dir.join("config.toml"), cfg.echo()?)?;
    let digest = Sha256::digest(&corpus_bytes);
    std::fs::write(dir.join("corpus.sha256"), format!("{:x}\n", digest))?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let metrics_file = File::create(dir.join("metrics.jsonl"))?;
    let mut metrics = BufWriter::new(metrics_file);
    let mut ckpt_error: Option<anyhow::Error> = None;

    let output = run_training(&cfg.train, &corpus, |event| {
        let line = match &event {
            RunEvent::Metric(m) => Some(serde_json::to_string(&LogLine::Train(m))),
            RunEvent::Eval(e) => Some(serde_json::to_string(&LogLine::Eval(e))),
            RunEvent::Checkpoint { step, model, halt } => {
                let file = if *halt {
                    ckpt_dir.join("halt.ckpt")
                } else {
                    ckpt_dir.join(format!("step_{step:06}.ckpt"))
                };
                if let Err(e) = checkpoint::save(&file, model, *step) {
                    ckpt_error.get_or_insert(e.into());
                }
                None
            }
        };
        if let Some(Ok(l)) = line {
            let _ = writeln!(metrics, "{l}");
        }
    })
    .context("training failed")?;
    metrics.flush()?;
    if let Some(e) = ckpt_error {
        return Err(e.context("writing checkpoint"));
    }

    checkpoint::save(&dir.join("checkpoints/final.ckpt"), &output.model, output.steps_done)?;
    println!(
        "run {} finished: {} steps, {:.3e} tokens, {:.3e} FLOPs -> {}",
        name,
        output.steps_done,
        output.tokens_seen,
        output.flops.total_flops(),
        dir.display()
    );
    if let Some(halt) = output.halt {
        return Err(HaltExit(format!("step {}: {}", halt.step, halt.reason)).into());
    }
    Ok(())
}
