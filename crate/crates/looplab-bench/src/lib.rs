//! Shared fixtures for the criterion benches.

use looplab_core::dynamics::InjectionMode;
use looplab_core::model::{Model, ModelConfig};

/// The desk-scale reference model used across benches.
pub fn bench_model(d_model: usize, injection: InjectionMode) -> Model {
    let cfg = ModelConfig {
        vocab: looplab_core::corpus::VOCAB_SIZE,
        d_model,
        n_heads: (d_model / 16).max(1),
        d_ff: None,
        l_prelude: 1,
        l_recurrent: 1,
        l_coda: 1,
        injection,
        prelude_norm: true,
        qk_norm: false,
        rope_theta: 50_000.0,
        context_len: 256,
        rms_eps: 1e-6,
        sigma0: None,
    };
    Model::init(cfg, 0).expect("bench model config is valid")
}

/// A byte window with simple structure.
pub fn bench_tokens(len: usize) -> (Vec<usize>, Vec<usize>) {
    let stream: Vec<usize> = (0..len + 1).map(|i| (i * 31 + 7) % 251).collect();
    (stream[..len].to_vec(), stream[1..].to_vec())
}
