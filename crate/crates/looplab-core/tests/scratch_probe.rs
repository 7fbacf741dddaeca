//! Temporary calibration probe (not part of the suite; run with --ignored).

use std::time::Instant;

use looplab_core::corpus::Corpus;
use looplab_core::dynamics::InjectionMode;
use looplab_core::model::ModelConfig;
use looplab_core::rng;
use looplab_core::sampling::DepthDistribution;
use looplab_core::trainer::{run_training, SamplerKind, SamplingMode, TrainConfig};

fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    const WORDS: [&str; 24] = [
        "the", "loop", "state", "norm", "depth", "decay", "stable", "stream", "token", "scale",
        "fit", "step", "model", "train", "data", "curve", "power", "law", "block", "unit",
        "input", "output", "fixed", "point",
    ];
    let mut r = rng::stream(seed);
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        let w = WORDS[(rng::uniform(&mut r, 0.0, WORDS.len() as f64) as usize).min(WORDS.len() - 1)];
        out.extend_from_slice(w.as_bytes());
        out.push(b' ');
        if rng::uniform(&mut r, 0.0, 1.0) < 0.08 {
            out.extend_from_slice(b"\n");
        }
    }
    out.truncate(len);
    out
}

fn cfg(d: usize, injection: InjectionMode, lr: f64, steps: u64, seq: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab: looplab_core::corpus::VOCAB_SIZE,
            d_model: d,
            n_heads: d / 16,
            d_ff: None,
            l_prelude: 1,
            l_recurrent: 1,
            l_coda: 1,
            injection,
            prelude_norm: true,
            qk_norm: false,
            rope_theta: 50_000.0,
            context_len: seq,
            rms_eps: 1e-6,
            sigma0: None,
        },
        mu_rec: 4,
        mu_bwd: None,
        dist: DepthDistribution::Poisson,
        sampler: SamplerKind::Corrected,
        sampling: SamplingMode::PerSequence,
        batch_size: batch,
        seq_len: seq,
        steps,
        lr,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-10,
        weight_decay: 0.0,
        grad_clip: 1.0,
        cooldown_fraction: 0.5,
        eval_depths: vec![],
        eval_interval: 0,
        eval_batches: 2,
        log_interval: 50,
        checkpoint_interval: 0,
        val_fraction: 0.05,
        state_norm_halt: Some(1e3),
        seed: 1234,
    }
}

#[test]
#[ignore]
fn probe_step_time_d64() {
    let corpus = Corpus::from_bytes(&synthetic_text(200_000, 1));
    let c = cfg(64, InjectionMode::ParcaeDiagonal, 3e-3, 20, 96, 4);
    let start = Instant::now();
    let out = run_training(&c, &corpus, |_| {}).unwrap();
    let dt = start.elapsed().as_secs_f64();
    println!(
        "d64 seq96 b4: 20 steps in {dt:.2}s ({:.0} ms/step), {:.2} GFLOP/s, final loss {:.3}",
        dt / 20.0 * 1000.0,
        out.flops.total_flops() / dt / 1e9,
        out.metrics.last().unwrap().loss
    );
}

/// Documents of fresh random key->value bindings, each binding repeated a
/// few times. Repeat occurrences are only predictable by in-context
/// retrieval, which a single looped attention block needs depth to perform.
fn kv_recall_text(len: usize, seed: u64) -> Vec<u8> {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut r = rng::stream(seed);
    let pick = |r: &mut rand_chacha::ChaCha8Rng| {
        ALPHA[(rng::uniform(r, 0.0, ALPHA.len() as f64) as usize).min(ALPHA.len() - 1)]
    };
    let mut out = Vec::with_capacity(len + 128);
    while out.len() < len {
        let npairs = 4;
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for _ in 0..npairs {
            keys.push([pick(&mut r), pick(&mut r)]);
            vals.push([pick(&mut r), pick(&mut r)]);
        }
        for _round in 0..4 {
            // Deterministic-ish shuffle: rotate by a fresh offset.
            let off = (rng::uniform(&mut r, 0.0, npairs as f64) as usize).min(npairs - 1);
            for i in 0..npairs {
                let j = (i + off) % npairs;
                out.extend_from_slice(&keys[j]);
                out.push(b'=');
                out.extend_from_slice(&vals[j]);
                out.push(b';');
            }
        }
        out.extend_from_slice(b"\n");
    }
    out.truncate(len);
    out
}

/// Repeated random motifs: each document fixes a short "k=v;" motif and
/// repeats it, so later repeats are predictable only by in-context copying.
fn motif_text(len: usize, seed: u64) -> Vec<u8> {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut r = rng::stream(seed);
    let pick = |r: &mut rand_chacha::ChaCha8Rng| {
        ALPHA[(rng::uniform(r, 0.0, ALPHA.len() as f64) as usize).min(ALPHA.len() - 1)]
    };
    let mut out = Vec::with_capacity(len + 128);
    while out.len() < len {
        let mut motif = Vec::new();
        for _ in 0..3 {
            motif.push(pick(&mut r));
            motif.push(b'=');
            motif.push(pick(&mut r));
            motif.push(b';');
        }
        for _ in 0..6 {
            out.extend_from_slice(&motif);
        }
        out.push(b'\n');
    }
    out.truncate(len);
    out
}

fn depth_curve(tag: &str, text: Vec<u8>, steps: u64) {
    let corpus = Corpus::from_bytes(&text);
    let mut c = cfg(64, InjectionMode::ParcaeDiagonal, 3e-3, steps, 96, 8);
    c.state_norm_halt = None;
    let start = Instant::now();
    let out = run_training(&c, &corpus, |_| {}).unwrap();
    println!(
        "{tag}: trained {} steps in {:.0}s, final loss {:.3}",
        out.steps_done,
        start.elapsed().as_secs_f64(),
        out.metrics.last().unwrap().loss
    );
    let (_, val) = corpus.split(0.05);
    let settings = looplab_core::trainer::EvalSettings { batches: 8, seq_len: 96, seed: 0xe0a };
    for t in [1u32, 2, 3, 4, 6, 8, 12] {
        let loss = looplab_core::trainer::evaluate(&out.model, val, t, &settings).unwrap();
        println!("{tag} T={t:>2}: loss {loss:.4}");
    }
}

#[test]
#[ignore]
fn probe_kv_recall_depth_curve() {
    depth_curve("kv2000", kv_recall_text(2_000_000, 0xde5c), 2000);
}

#[test]
#[ignore]
fn probe_motif_depth_curve() {
    depth_curve("motif", motif_text(2_000_000, 0xde5c), 1200);
}

/// Shift-cipher lines: "plain|shifted" where the tail is the head shifted by
/// a per-line offset announced up front. Decoding needs per-position compute.
fn cipher_text(len: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed);
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        let shift = 1 + (rng::uniform(&mut r, 0.0, 5.0) as u8).min(4);
        let n = 8 + (rng::uniform(&mut r, 0.0, 8.0) as usize).min(7);
        let head: Vec<u8> = (0..n)
            .map(|_| b'a' + (rng::uniform(&mut r, 0.0, 26.0) as u8).min(25))
            .collect();
        out.push(b'0' + shift);
        out.push(b':');
        out.extend_from_slice(&head);
        out.push(b'|');
        for &c in &head {
            out.push(b'a' + ((c - b'a' + shift) % 26));
        }
        out.push(b'\n');
    }
    out.truncate(len);
    out
}

/// Run-length counting lines: "c4:cccc;f2:ff;" - emitting the right number
/// of repeats requires tracking a count across positions.
fn counting_text(len: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed);
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        for _ in 0..6 {
            let c = b'a' + (rng::uniform(&mut r, 0.0, 26.0) as u8).min(25);
            let k = 2 + (rng::uniform(&mut r, 0.0, 6.0) as usize).min(5);
            out.push(c);
            out.push(b'0' + k as u8);
            out.push(b':');
            out.extend(std::iter::repeat_n(c, k));
            out.push(b';');
        }
        out.push(b'\n');
    }
    out.truncate(len);
    out
}

fn rich_mixture(len: usize, seed: u64) -> Vec<u8> {
    let mut text = Vec::new();
    let mut r = rng::stream(seed);
    while text.len() < len {
        let pick = rng::uniform(&mut r, 0.0, 1.0);
        let sub = rng::uniform(&mut r, 0.0, 1e9) as u64;
        let chunk = 3000;
        if pick < 0.3 {
            text.extend_from_slice(&synthetic_text(chunk, sub));
        } else if pick < 0.5 {
            text.extend_from_slice(&motif_text(chunk, sub));
        } else if pick < 0.7 {
            text.extend_from_slice(&kv_recall_text(chunk, sub));
        } else if pick < 0.85 {
            text.extend_from_slice(&cipher_text(chunk, sub));
        } else {
            text.extend_from_slice(&counting_text(chunk, sub));
        }
    }
    text.truncate(len);
    text
}

#[test]
#[ignore]
fn probe_rich_mixture_depth_curve() {
    let corpus = Corpus::from_bytes(&rich_mixture(2_000_000, 0xde5c));
    let mut c = cfg(64, InjectionMode::ParcaeDiagonal, 3e-3, 2500, 96, 8);
    c.state_norm_halt = None;
    let start = Instant::now();
    let out = run_training(&c, &corpus, |_| {}).unwrap();
    println!(
        "rich: trained {} steps in {:.0}s, final loss {:.3}",
        out.steps_done,
        start.elapsed().as_secs_f64(),
        out.metrics.last().unwrap().loss
    );
    let (_, val) = corpus.split(0.05);
    let settings = looplab_core::trainer::EvalSettings { batches: 8, seq_len: 96, seed: 0xe0a };
    let mut points = Vec::new();
    for t in 1u32..=12 {
        let loss = looplab_core::trainer::evaluate(&out.model, val, t, &settings).unwrap();
        println!("rich T={t:>2}: loss {loss:.5}");
        points.push(looplab_core::fit::TtcPoint { t, loss });
    }
    let opts = looplab_core::fit::FitOptions::quick(60, 0xacc9);
    for form in looplab_core::fit::TtcForm::ALL {
        let fit = looplab_core::fit::fit_ttc(&points, form, &opts).unwrap();
        let (_, mean) = looplab_core::fit::ttc_objective(form, &fit.coefficients, &points);
        println!("rich form {form}: mean huber {mean:.4e}");
    }
}

#[test]
#[ignore]
fn probe_lr_sweep_divergence() {
    let corpus = Corpus::from_bytes(&synthetic_text(300_000, 2));
    for wd in [0.0, 0.1] {
        for lr in [6e-3, 1e-2, 1.5e-2, 2.2e-2] {
            for injection in [InjectionMode::Concatenation, InjectionMode::ParcaeDiagonal] {
                let mut c = cfg(32, injection, lr, 1500, 64, 8);
                c.weight_decay = wd;
                c.state_norm_halt = None;
                let start = Instant::now();
                let out = run_training(&c, &corpus, |_| {}).unwrap();
                let rho = looplab_core::trainer::injection_rho(&out.model);
                let status = match &out.halt {
                    Some(h) => {
                        format!("DIVERGED step {} ({})", h.step, &h.reason[..h.reason.len().min(40)])
                    }
                    None => format!("ok, final loss {:.3}", out.metrics.last().unwrap().loss),
                };
                println!(
                    "wd {wd} lr {lr:>6}: {injection:?}: {status}; rho {rho:.4}; max norm {:.2e}; {:.0}s",
                    out.metrics.iter().map(|m| m.state_norm).fold(0.0, f64::max),
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
}
