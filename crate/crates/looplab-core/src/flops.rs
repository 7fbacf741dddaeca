//! Effective-parameter and FLOP accounting for looped models.
//!
//! A looped model unrolled mu_rec times has effective parameters
//! N(mu_rec) = N_prelude_coda + mu_rec * N_per_loop. Truncated backprop splits
//! those into N_hat1 (not backpropagated through, costing 2 FLOPs per
//! parameter per token) and N_hat2 (backpropagated, costing 6), giving
//! total = (2 N_hat1 + 6 N_hat2) D plus an attention term.
//!
//! Conventions, frozen here and matched by the engine's MAC instrumentation:
//! * the tied embedding/unembedding table is counted once, as unembedding
//!   (attributed to the coda side); the embedding lookup itself is free;
//! * injection parameters count inside the loop (their application is work
//!   on the critical path every step); the readout C counts on the coda side;
//! * attention costs 2 matmuls of seq^2 * d_head MACs per head per layer
//!   (mask included), i.e. 4 * seq * d_model forward FLOPs per token per
//!   layer, tripled for layers that are backpropagated through;
//! * normalization gains are counted as parameters but their elementwise
//!   work is not instrumented; the discrepancy is far below the 2% check.

use serde::{Deserialize, Serialize};

use crate::dynamics::InjectionMode;
use crate::model::ModelConfig;

/// Exact parameter enumeration split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveParams {
    /// Parameters applied once per loop iteration (recurrent blocks plus
    /// injection parameters).
    pub n_per_loop: usize,
    /// Parameters applied once per forward (prelude, coda, norms, readout,
    /// unembedding).
    pub n_prelude_coda: usize,
    /// n_prelude_coda + mu_rec * n_per_loop.
    pub n_effective: usize,
}

/// One pre-norm transformer block's parameter count.
fn block_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let d_ff = config.d_ff();
    // Two norm gains, four attention projections, two MLP matrices.
    2 * d + 4 * d * d + 2 * d * d_ff
}

fn injection_per_loop(config: &ModelConfig) -> usize {
    let d = config.d_model;
    match config.injection {
        InjectionMode::Addition => 0,
        InjectionMode::Concatenation => d * 2 * d,
        // log_a + delta_raw + B.
        InjectionMode::ParcaeDiagonal => 2 * d + d * d,
    }
}

fn readout_params(config: &ModelConfig) -> usize {
    match config.injection {
        InjectionMode::ParcaeDiagonal => config.d_model * config.d_model,
        _ => 0,
    }
}

/// Parameter enumeration for a model unrolled `mu_rec` times. Embedding is
/// excluded; unembedding (the tied table) is included.
pub fn effective_params(config: &ModelConfig, mu_rec: u32) -> EffectiveParams {
    let d = config.d_model;
    let block = block_params(config);
    let n_per_loop = config.l_recurrent * block + injection_per_loop(config);
    let mut n_prelude_coda = (config.l_prelude + config.l_coda) * block;
    if config.prelude_norm {
        n_prelude_coda += d;
    }
    n_prelude_coda += d; // final norm gain
    n_prelude_coda += config.vocab * d; // unembedding (tied table, counted once)
    n_prelude_coda += readout_params(config);
    EffectiveParams {
        n_per_loop,
        n_prelude_coda,
        n_effective: n_prelude_coda + mu_rec as usize * n_per_loop,
    }
}

/// FLOP budget of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopBudget {
    /// Effective params not backpropagated through.
    pub n_hat1: f64,
    /// Effective params backpropagated through.
    pub n_hat2: f64,
    /// Training tokens.
    pub tokens: f64,
    /// Attention FLOPs (not captured by parameter counting).
    pub attention: f64,
    /// (2 n_hat1 + 6 n_hat2) * tokens + attention.
    pub total: f64,
}

fn split_and_attention(
    config: &ModelConfig,
    mu_rec: u32,
    mu_bwd: u32,
    seq_len: usize,
) -> (f64, f64, f64) {
    assert!(mu_bwd <= mu_rec, "mu_bwd {mu_bwd} must not exceed mu_rec {mu_rec}");
    let ep = effective_params(config, mu_rec);
    let n_hat2 = ep.n_prelude_coda as f64 + mu_bwd as f64 * ep.n_per_loop as f64;
    let n_hat1 = (mu_rec - mu_bwd) as f64 * ep.n_per_loop as f64;
    let attn_fwd_per_layer = 4.0 * seq_len as f64 * config.d_model as f64;
    let grad_layers =
        (config.l_prelude + config.l_coda) as f64 + mu_bwd as f64 * config.l_recurrent as f64;
    let nograd_layers = (mu_rec - mu_bwd) as f64 * config.l_recurrent as f64;
    let attn_per_token = attn_fwd_per_layer * (3.0 * grad_layers + nograd_layers);
    (n_hat1, n_hat2, attn_per_token)
}

/// Per-token training FLOPs at the given depth split. Linear in tokens, so
/// token budgets invert exactly.
pub fn flops_per_token(config: &ModelConfig, mu_rec: u32, mu_bwd: u32, seq_len: usize) -> f64 {
    let (n_hat1, n_hat2, attn) = split_and_attention(config, mu_rec, mu_bwd, seq_len);
    2.0 * n_hat1 + 6.0 * n_hat2 + attn
}

/// The (2 N_hat1 + 6 N_hat2) D + attention budget for `tokens` of training.
pub fn training_flops(
    config: &ModelConfig,
    mu_rec: u32,
    mu_bwd: u32,
    tokens: f64,
    seq_len: usize,
) -> FlopBudget {
    let (n_hat1, n_hat2, attn_per_token) = split_and_attention(config, mu_rec, mu_bwd, seq_len);
    FlopBudget {
        n_hat1,
        n_hat2,
        tokens,
        attention: attn_per_token * tokens,
        total: (2.0 * n_hat1 + 6.0 * n_hat2) * tokens + attn_per_token * tokens,
    }
}

/// Token count that spends `budget` FLOPs at the given depths.
pub fn tokens_for_budget(
    config: &ModelConfig,
    mu_rec: u32,
    mu_bwd: u32,
    budget: f64,
    seq_len: usize,
) -> f64 {
    budget / flops_per_token(config, mu_rec, mu_bwd, seq_len)
}
