//! The looped architecture: a prelude stack embeds tokens, a recurrent stack
//! is applied T times with a configurable input injection, and a coda stack
//! reads the final state out through the tied unembedding.
//!
//! Blocks are pre-norm (RMS-Norm before attention and before the MLP) with no
//! residual or post normalization inside the recurrent unit; stability comes
//! from the injection parameterization, not from normalizing the stream.

mod forward;

pub use forward::{ForwardOutput, LoopState, TrainingGraph};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, InjectionMode, InjectionParams, InjectionWeights, LinearizedInjection};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad model config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
}

/// Architecture hyperparameters. `d_model` is used for the hidden state, the
/// prelude output, and the readout alike (d_h = d_e = d_c).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub l_prelude: usize,
    pub l_recurrent: usize,
    pub l_coda: usize,
    pub injection: InjectionMode,
    #[serde(default = "default_true")]
    pub prelude_norm: bool,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    pub context_len: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    /// State-init scale; defaults to the scaled-init magnitude sqrt(2/(5 d)).
    #[serde(default)]
    pub sigma0: Option<f64>,
}

fn default_vocab() -> usize {
    crate::corpus::VOCAB_SIZE
}

fn default_true() -> bool {
    true
}

fn default_rope_theta() -> f64 {
    50_000.0
}

fn default_rms_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0.unwrap_or((2.0 / (5.0 * self.d_model as f64)).sqrt())
    }

    /// Scaled-init standard deviation sqrt(2 / (5 d)).
    pub fn init_sigma(&self) -> f64 {
        (2.0 / (5.0 * self.d_model as f64)).sqrt()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.vocab == 0 || self.context_len == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "rotary needs an even head dimension, got {}",
                self.d_head()
            )));
        }
        if self.l_recurrent == 0 {
            return Err(ModelError::Config("recurrent stack must have at least one block".into()));
        }
        if self.sigma0.is_some_and(|s| s < 0.0) {
            return Err(ModelError::Config("sigma0 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("stored params stay finite")
    }
}

/// Registration-ordered parameter arrays; the order is the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Param { name: name.into(), shape, data });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.entries[idx].data
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(Param::numel).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLayout {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    pub wfc: usize,
    pub wproj: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum InjectLayout {
    Addition,
    Concat { w: usize },
    Parcae { log_a: usize, delta_raw: usize, b: usize, c: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub prelude: Vec<BlockLayout>,
    pub prelude_norm: Option<usize>,
    pub inject: InjectLayout,
    pub recurrent: Vec<BlockLayout>,
    pub coda: Vec<BlockLayout>,
    pub final_norm: usize,
}

/// A looped model: config + parameters. Read-only during forward passes;
/// training mutation is single-writer.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) layout: Layout,
}

impl Model {
    /// Initializes parameters: scaled normal N(0, 2/(5d)) everywhere except
    /// block output projections (attention out and MLP down), which start at
    /// zero so early training sits near the linear regime.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(rng::derive_seed(seed, &[0x1417]));
        let d = config.d_model;
        let sigma = config.init_sigma();
        let mut store = ParamStore::default();

        let embed = store.push(
            "embed.table",
            vec![config.vocab, d],
            rng::normal_vec(&mut r, config.vocab * d, sigma),
        );

        let push_block = |store: &mut ParamStore, r: &mut rand_chacha::ChaCha8Rng, prefix: &str| {
            let d_ff = config.d_ff();
            BlockLayout {
                ln1: store.push(format!("{prefix}.ln1.gain"), vec![d], vec![1.0; d]),
                wq: store.push(format!("{prefix}.attn.wq"), vec![d, d], rng::normal_vec(r, d * d, sigma)),
                wk: store.push(format!("{prefix}.attn.wk"), vec![d, d], rng::normal_vec(r, d * d, sigma)),
                wv: store.push(format!("{prefix}.attn.wv"), vec![d, d], rng::normal_vec(r, d * d, sigma)),
                wo: store.push(format!("{prefix}.attn.wo"), vec![d, d], vec![0.0; d * d]),
                ln2: store.push(format!("{prefix}.ln2.gain"), vec![d], vec![1.0; d]),
                wfc: store.push(format!("{prefix}.mlp.wfc"), vec![d, d_ff], rng::normal_vec(r, d * d_ff, sigma)),
                wproj: store.push(format!("{prefix}.mlp.wproj"), vec![d_ff, d], vec![0.0; d_ff * d]),
            }
        };

        let prelude: Vec<BlockLayout> =
            (0..config.l_prelude).map(|i| push_block(&mut store, &mut r, &format!("prelude.{i}"))).collect();
        let prelude_norm = config
            .prelude_norm
            .then(|| store.push("prelude_norm.gain", vec![d], vec![1.0; d]));

        let inject = match config.injection {
            InjectionMode::Addition => InjectLayout::Addition,
            InjectionMode::Concatenation => InjectLayout::Concat {
                w: store.push("inject.w", vec![d, 2 * d], rng::normal_vec(&mut r, 2 * d * d, sigma)),
            },
            InjectionMode::ParcaeDiagonal => {
                let ip = InjectionParams::init(d, d, d, rng::derive_seed(seed, &[0xd1a6]));
                InjectLayout::Parcae {
                    log_a: store.push("inject.log_a", vec![d], ip.log_a),
                    delta_raw: store.push("inject.delta_raw", vec![d], ip.delta_raw),
                    b: store.push("inject.b", vec![d, d], ip.b.data().to_vec()),
                    c: store.push("readout.c", vec![d, d], ip.c.data().to_vec()),
                }
            }
        };

        let recurrent: Vec<BlockLayout> =
            (0..config.l_recurrent).map(|i| push_block(&mut store, &mut r, &format!("recurrent.{i}"))).collect();
        let coda: Vec<BlockLayout> =
            (0..config.l_coda).map(|i| push_block(&mut store, &mut r, &format!("coda.{i}"))).collect();
        let final_norm = store.push("final_norm.gain", vec![d], vec![1.0; d]);

        let layout =
            Layout { embed, prelude, prelude_norm, inject, recurrent, coda, final_norm };
        Ok(Self { config, store, layout })
    }

    /// Rebuilds a model from named arrays (checkpoint load). Array names and
    /// shapes must match the layout derived from `config` exactly.
    pub fn from_arrays(
        config: ModelConfig,
        arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self, ModelError> {
        let reference = Model::init(config.clone(), 0)?;
        if arrays.len() != reference.store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint holds {} arrays, config expects {}",
                arrays.len(),
                reference.store.len()
            )));
        }
        let mut store = ParamStore::default();
        for ((name, shape, data), expect) in arrays.into_iter().zip(reference.store.entries()) {
            if name != expect.name || shape != expect.shape {
                return Err(ModelError::Config(format!(
                    "checkpoint array {name} {shape:?} does not match expected {} {:?}",
                    expect.name, expect.shape
                )));
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(ModelError::Config(format!("array {name} holds non-finite values")));
            }
            store.push(name, shape, data);
        }
        Ok(Self { config, store, layout: reference.layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The dynamical-system parameters, when the model carries them.
    pub fn injection_params(&self) -> Option<InjectionParams> {
        match &self.layout.inject {
            InjectLayout::Parcae { log_a, delta_raw, b, c } => Some(InjectionParams {
                log_a: self.store.get(*log_a).data.clone(),
                delta_raw: self.store.get(*delta_raw).data.clone(),
                b: self.store.get(*b).tensor(),
                c: self.store.get(*c).tensor(),
            }),
            _ => None,
        }
    }

    /// The linearized (A_bar, B_bar) view of this model's injection.
    pub fn linearized_injection(&self) -> Result<LinearizedInjection, ModelError> {
        let lin = match &self.layout.inject {
            InjectLayout::Addition => {
                dynamics::recast_injection(InjectionWeights::Addition { d_h: self.config.d_model })?
            }
            InjectLayout::Concat { w } => {
                let wt = self.store.get(*w).tensor();
                dynamics::recast_injection(InjectionWeights::Concatenation { w: &wt })?
            }
            InjectLayout::Parcae { .. } => {
                let params = self.injection_params().expect("parcae layout");
                dynamics::recast_injection(InjectionWeights::ParcaeDiagonal { params: &params })?
            }
        };
        Ok(lin)
    }

    /// Spectral radius of the linearized transition matrix.
    pub fn injection_spectral_radius(&self) -> Result<f64, ModelError> {
        Ok(self.linearized_injection()?.a_bar.spectral_radius()?)
    }

    /// Gaussian state init at the configured scale; deterministic per seed.
    pub fn init_state(&self, n: usize, seed: u64) -> Tensor {
        init_state(n, self.config.d_model, self.config.sigma0(), seed)
    }
}

/// h_0 with i.i.d. N(0, sigma0^2) entries; zero when sigma0 = 0.
pub fn init_state(n: usize, d_h: usize, sigma0: f64, seed: u64) -> Tensor {
    assert!(sigma0 >= 0.0);
    let mut r = rng::stream(seed);
    let data = if sigma0 == 0.0 {
        vec![0.0; n * d_h]
    } else {
        rng::normal_vec(&mut r, n * d_h, sigma0)
    };
    Tensor::matrix(n, d_h, data).expect("finite state init")
}

/// ||h||_2 over all entries (Appendix-style recurrent state norm).
pub fn state_norm(h: &Tensor) -> f64 {
    h.frobenius_norm()
}

/// ||h_t - h_prev||_2, the jump size at the final recurrence.
pub fn recurrent_residual(h_t: &Tensor, h_prev: &Tensor) -> f64 {
    assert_eq!(h_t.shape(), h_prev.shape(), "recurrent_residual shape mismatch");
    h_t.data()
        .iter()
        .zip(h_prev.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}
