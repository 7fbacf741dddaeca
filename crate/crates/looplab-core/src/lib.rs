//! Desk-scale laboratory for stable looped ("recurrent-depth") transformers.
//!
//! The crate provides, in dependency order:
//!
//! * [`tensor`] — a minimal dense f64 tensor engine with reverse-mode
//!   autodiff, sufficient for every block in the looped architectures.
//! * [`dynamics`] — the linear time-invariant surrogate of the residual
//!   stream: parameterization, zero-order-hold discretization, spectral
//!   analysis, stability classification, and exact linear rollouts.
//! * [`model`] — the looped architecture itself: prelude / recurrent / coda
//!   stacks with configurable input injection (addition, concatenation, or
//!   the stable diagonal state-space form).
//! * [`sampling`] — stochastic depth distributions, the baseline and
//!   corrected truncation samplers, and batched per-sequence schedules.
//! * [`trainer`] — stochastic-depth training with truncated backpropagation
//!   through depth, decoupled-weight-decay Adam, and metric logging.
//! * [`flops`] — effective-parameter and FLOP accounting for looped models.
//! * [`fit`] — the scaling-law toolkit: Huber objective, L-BFGS with random
//!   restarts, parabolic isoFLOP minima, the training law, test-time decay
//!   laws, and the unified law.
//! * [`corpus`] / [`checkpoint`] — byte-level tokenization and the on-disk
//!   parameter container.

pub mod checkpoint;
pub mod corpus;
pub mod dynamics;
pub mod fit;
pub mod flops;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Tensor, Var};
