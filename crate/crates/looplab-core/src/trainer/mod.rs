//! Stochastic-depth training with truncated backpropagation through depth.
//!
//! Each batch gets a depth schedule (per-sequence or per-micro-batch), every
//! sequence runs its own differentiated graph (independent graphs are safe to
//! evaluate in parallel), and gradients reduce in sequence order so runs are
//! bit-reproducible for a fixed seed. A non-finite loss aborts the step and
//! halts the run with a final checkpoint: this artifact exists to study
//! divergence, not to survive it.

mod adam;

pub use adam::{AdamHyper, AdamState};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, CorpusView};
use crate::dynamics::InjectionMode;
use crate::model::{Model, ModelConfig, ModelError};
use crate::rng;
use crate::sampling::{DepthDistribution, DepthSchedule, SamplingError};
use crate::tensor::{FlopCount, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("bad train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl TrainerError {
    /// True when the failure is a non-finite forward value (loss spike /
    /// state explosion), which triggers the halt-and-dump policy.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainerError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

/// Which truncation sampler builds schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Corrected,
    Baseline,
}

/// Depth-draw granularity inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    PerSequence,
    PerMicroBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mu_rec: u32,
    /// Defaults to ceil(mu_rec / 2).
    #[serde(default)]
    pub mu_bwd: Option<u32>,
    #[serde(default = "default_dist")]
    pub dist: DepthDistribution,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingMode,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Fraction of total steps spent in the final linear cooldown.
    #[serde(default = "default_cooldown")]
    pub cooldown_fraction: f64,
    #[serde(default = "default_eval_depths")]
    pub eval_depths: Vec<u32>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Optional divergence tripwire: halt when the mean final-state norm
    /// exceeds this.
    #[serde(default)]
    pub state_norm_halt: Option<f64>,
    pub seed: u64,
}

fn default_dist() -> DepthDistribution {
    DepthDistribution::Poisson
}
fn default_sampler() -> SamplerKind {
    SamplerKind::Corrected
}
fn default_sampling() -> SamplingMode {
    SamplingMode::PerSequence
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-10
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_cooldown() -> f64 {
    0.5
}
fn default_eval_depths() -> Vec<u32> {
    vec![1, 4, 8]
}
fn default_eval_interval() -> u64 {
    200
}
fn default_eval_batches() -> usize {
    4
}
fn default_log_interval() -> u64 {
    10
}
fn default_checkpoint_interval() -> u64 {
    500
}
fn default_val_fraction() -> f64 {
    0.05
}

impl TrainConfig {
    pub fn mu_bwd(&self) -> u32 {
        self.mu_bwd.unwrap_or_else(|| crate::sampling::mu_bwd_rule(self.mu_rec))
    }

    pub fn adam_hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        self.model.validate().map_err(TrainerError::Model)?;
        if self.mu_rec < 1 {
            return Err(TrainerError::Config("mu_rec must be >= 1".into()));
        }
        if self.mu_bwd() > self.mu_rec {
            return Err(TrainerError::Config(format!(
                "mu_bwd {} exceeds mu_rec {}",
                self.mu_bwd(),
                self.mu_rec
            )));
        }
        if self.grad_clip <= 0.0 {
            return Err(TrainerError::Config("grad_clip must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 || self.seq_len == 0 {
            return Err(TrainerError::Config("batch_size, steps, seq_len must be positive".into()));
        }
        if self.seq_len > self.model.context_len {
            return Err(TrainerError::Config(format!(
                "seq_len {} exceeds context_len {}",
                self.seq_len, self.model.context_len
            )));
        }
        if !(0.0..=1.0).contains(&self.cooldown_fraction) {
            return Err(TrainerError::Config("cooldown_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Constant learning rate with a linear cooldown over the final fraction.
pub fn lr_at_step(step: u64, total: u64, base: f64, cooldown_fraction: f64) -> f64 {
    let cooldown = ((total as f64) * cooldown_fraction).round() as u64;
    let remaining = total.saturating_sub(step);
    if remaining >= cooldown || cooldown == 0 {
        base
    } else {
        base * remaining as f64 / cooldown as f64
    }
}

/// One logged observation of the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean over the batch of ||h_T||.
    pub state_norm: f64,
    /// Mean over the batch of ||h_T - h_{T-1}||.
    pub residual: f64,
    /// Spectral radius of the linearized injection (A_bar, or W1 for
    /// concatenation).
    pub rho: f64,
    pub lr: f64,
    pub tokens: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub depth: u32,
    pub loss: f64,
}

/// Why a run stopped early.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HaltReport {
    pub step: u64,
    pub reason: String,
}

/// Streamed run events for persistence.
pub enum RunEvent<'a> {
    Metric(&'a MetricRecord),
    Eval(&'a EvalRecord),
    Checkpoint { step: u64, model: &'a Model, halt: bool },
}

pub struct RunOutput {
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub evals: Vec<EvalRecord>,
    pub halt: Option<HaltReport>,
    pub tokens_seen: f64,
    pub flops: FlopCount,
    pub steps_done: u64,
}

/// A batch of (input, target) windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Draws `batch_size` random windows from the view; deterministic per seed.
pub fn sample_batch(
    view: CorpusView<'_>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Batch, CorpusError> {
    let span = view.len();
    if span < seq_len + 1 {
        return Err(CorpusError::TooSmall { have: span, need: seq_len + 1 });
    }
    let mut r = rng::stream(seed);
    let max_start = span - seq_len - 1;
    let sequences = (0..batch_size)
        .map(|_| {
            let start = (rng::uniform(&mut r, 0.0, (max_start + 1) as f64) as usize).min(max_start);
            view.window(start, seq_len)
        })
        .collect::<Result<_, _>>()?;
    Ok(Batch { sequences })
}

/// Builds the depth schedule for one step per the configured sampler/mode.
pub fn build_schedule(cfg: &TrainConfig, step: u64) -> Result<DepthSchedule, TrainerError> {
    let seed = rng::derive_seed(cfg.seed, &[0x5c4e, step]);
    let (mu_rec, mu_bwd) = (cfg.mu_rec, cfg.mu_bwd());
    let schedule = match (cfg.sampler, cfg.sampling) {
        (SamplerKind::Corrected, SamplingMode::PerSequence) => {
            DepthSchedule::per_sequence(cfg.batch_size, mu_rec, mu_bwd, cfg.dist, seed)
        }
        (SamplerKind::Corrected, SamplingMode::PerMicroBatch) => {
            DepthSchedule::per_micro_batch(cfg.batch_size, mu_rec, mu_bwd, cfg.dist, seed)
        }
        (SamplerKind::Baseline, SamplingMode::PerSequence) => {
            DepthSchedule::per_sequence_baseline(cfg.batch_size, mu_rec, mu_bwd, cfg.dist, seed)?
        }
        (SamplerKind::Baseline, SamplingMode::PerMicroBatch) => {
            let mut s =
                DepthSchedule::per_sequence_baseline(1, mu_rec, mu_bwd, cfg.dist, seed)?;
            let entry = s.entries[0];
            s.entries = (0..cfg.batch_size).map(|_| entry).collect();
            s
        }
    };
    Ok(schedule)
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_grad_norm: f64,
    pub mean_state_norm: f64,
    pub mean_residual: f64,
    pub flops: FlopCount,
}

struct PerSequence {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
    state_norm: f64,
    residual: f64,
    flops: FlopCount,
}

/// Forward/backward over the batch under `schedule`, then one clipped Adam
/// update. Per-sequence work runs in parallel; the reduction is ordered.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &Batch,
    schedule: &DepthSchedule,
    hyper: &AdamHyper,
    grad_clip: f64,
) -> Result<StepStats, TrainerError> {
    assert_eq!(batch.sequences.len(), schedule.entries.len(), "batch/schedule size mismatch");
    let shared: &Model = model;
    let results: Vec<Result<PerSequence, ModelError>> = batch
        .sequences
        .par_iter()
        .zip(schedule.entries.par_iter())
        .map(|((input, target), entry)| {
            let h0_seed = rng::derive_seed(entry.seed, &[0x401d]);
            let h0 = shared.init_state(input.len(), h0_seed);
            let mut tg = shared.training_graph(input, target, entry.n, entry.k, &h0)?;
            tg.backward().map_err(ModelError::from)?;
            let grads = (0..shared.params().len())
                .map(|i| tg.grad(i).map(<[f64]>::to_vec))
                .collect();
            Ok(PerSequence {
                loss: tg.loss_value(),
                grads,
                state_norm: *tg.loop_state.state_norms.last().expect("nonempty history"),
                residual: tg.loop_state.residuals.last().copied().unwrap_or(0.0),
                flops: tg.flops(),
            })
        })
        .collect();

    let b = batch.sequences.len() as f64;
    let mut grad_sum: Vec<Vec<f64>> =
        model.params().entries().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    let mut state_norm = 0.0;
    let mut residual = 0.0;
    let mut flops = FlopCount::default();
    for res in results {
        let seq = res?;
        loss += seq.loss / b;
        state_norm += seq.state_norm / b;
        residual += seq.residual / b;
        flops.add(seq.flops);
        for (sum, g) in grad_sum.iter_mut().zip(&seq.grads) {
            if let Some(g) = g {
                for (s, v) in sum.iter_mut().zip(g) {
                    *s += v / b;
                }
            }
        }
    }

    let grad_norm = grad_sum
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let clipped_grad_norm = if grad_norm > grad_clip {
        let scale = grad_clip / grad_norm;
        for g in &mut grad_sum {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        grad_clip
    } else {
        grad_norm
    };

    adam.update(model, &grad_sum, hyper);
    Ok(StepStats { loss, grad_norm, clipped_grad_norm, mean_state_norm: state_norm, mean_residual: residual, flops })
}

/// Spectral radius of the model's linearized injection for metric logging.
pub fn injection_rho(model: &Model) -> f64 {
    match model.config().injection {
        InjectionMode::Addition => 1.0,
        _ => model.injection_spectral_radius().unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub batches: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Mean cross-entropy at fixed depth `t_steps` over evenly spaced windows;
/// no depth sampling, fixed h0 seeds, deterministic.
pub fn evaluate(
    model: &Model,
    data: CorpusView<'_>,
    t_steps: u32,
    settings: &EvalSettings,
) -> Result<f64, TrainerError> {
    if t_steps < 1 {
        return Err(TrainerError::Config("evaluation depth must be >= 1".into()));
    }
    if data.len() < settings.seq_len + 1 {
        return Err(TrainerError::Corpus(CorpusError::TooSmall {
            have: data.len(),
            need: settings.seq_len + 1,
        }));
    }
    let max_start = data.len() - settings.seq_len - 1;
    let batches = settings.batches.max(1);
    let stride = (max_start / batches).max(1);
    let starts: Vec<usize> = (0..batches).map(|b| (b * stride).min(max_start)).collect();
    let losses: Vec<Result<f64, TrainerError>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &start)| {
            let (input, target) = data.window(start, settings.seq_len)?;
            let h0_seed = rng::derive_seed(settings.seed, &[0xe7a1, i as u64]);
            Ok(model.sequence_loss(&input, &target, t_steps, h0_seed)?)
        })
        .collect();
    let mut total = 0.0;
    for l in &losses {
        match l {
            Ok(v) => total += v / batches as f64,
            Err(e) => {
                return Err(match e {
                    TrainerError::Config(s) => TrainerError::Config(s.clone()),
                    _ => TrainerError::Config(format!("eval window failed: {e}")),
                })
            }
        }
    }
    Ok(total)
}

/// Depths deduplicated, first occurrence order preserved.
fn dedup_depths(depths: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for &d in depths {
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

/// The full training loop: schedule, step, metrics, periodic eval and
/// checkpoints. Returns normally with a halt report when divergence trips.
pub fn run_training(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut observer: impl FnMut(RunEvent<'_>),
) -> Result<RunOutput, TrainerError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainerError::Corpus(CorpusError::TooSmall { have: 0, need: cfg.seq_len + 1 }));
    }
    let (train_view, val_view) = corpus.split(cfg.val_fraction);
    let mut model = Model::init(cfg.model.clone(), rng::derive_seed(cfg.seed, &[0x0de1]))?;
    let mut adam = AdamState::new(&model);
    let eval_depths = dedup_depths(&cfg.eval_depths);
    let eval_settings =
        EvalSettings { batches: cfg.eval_batches, seq_len: cfg.seq_len, seed: rng::derive_seed(cfg.seed, &[0xe0a1]) };

    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut flops = FlopCount::default();
    let mut halt = None;
    let mut steps_done = 0;

    for step in 0..cfg.steps {
        let lr = lr_at_step(step, cfg.steps, cfg.lr, cfg.cooldown_fraction);
        let schedule = build_schedule(cfg, step)?;
        let batch = sample_batch(
            train_view,
            cfg.batch_size,
            cfg.seq_len,
            rng::derive_seed(cfg.seed, &[0xba7c, step]),
        )?;
        let stats = match train_step(&mut model, &mut adam, &batch, &schedule, &cfg.adam_hyper(lr), cfg.grad_clip) {
            Ok(stats) => stats,
            Err(e) if e.is_non_finite() => {
                halt = Some(HaltReport { step, reason: format!("{e}") });
                observer(RunEvent::Checkpoint { step, model: &model, halt: true });
                break;
            }
            Err(e) => return Err(e),
        };
        steps_done = step + 1;
        flops.add(stats.flops);
        let tokens = (steps_done * cfg.batch_size as u64 * cfg.seq_len as u64) as f64;

        let last = step + 1 == cfg.steps;
        if step % cfg.log_interval == 0 || last {
            let record = MetricRecord {
                step,
                loss: stats.loss,
                state_norm: stats.mean_state_norm,
                residual: stats.mean_residual,
                rho: injection_rho(&model),
                lr,
                tokens,
            };
            observer(RunEvent::Metric(&record));
            metrics.push(record);
        }
        if (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) || last {
            for &depth in &eval_depths {
                let loss = evaluate(&model, val_view, depth, &eval_settings)?;
                let record = EvalRecord { step, depth, loss };
                observer(RunEvent::Eval(&record));
                evals.push(record);
            }
        }
        if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) || last {
            observer(RunEvent::Checkpoint { step, model: &model, halt: false });
        }
        if let Some(limit) = cfg.state_norm_halt {
            if stats.mean_state_norm > limit {
                halt = Some(HaltReport {
                    step,
                    reason: format!("state norm {} exceeded {limit}", stats.mean_state_norm),
                });
                observer(RunEvent::Checkpoint { step, model: &model, halt: true });
                break;
            }
        }
    }

    let tokens_seen = (steps_done * cfg.batch_size as u64 * cfg.seq_len as u64) as f64;
    Ok(RunOutput { model, metrics, evals, halt, tokens_seen, flops, steps_done })
}
