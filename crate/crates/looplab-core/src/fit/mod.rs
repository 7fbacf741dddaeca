//! Scaling-law fitting toolkit.
//!
//! All parametric fits minimize a Huber objective on log-loss residuals with
//! L-BFGS under random restarts; positive-constrained coefficients run in
//! log-parameter space so the optimizer is unconstrained. Fit results carry
//! both the summed and the mean objective (reported conventions vary), and
//! every fit is re-verifiable by evaluating the objective at the returned
//! coefficients.

pub mod lbfgs;
mod laws;
mod parabola;

pub use laws::{
    fit_training_law, fit_ttc, fit_unified, functional_form_report, training_law_objective,
    training_law_predict, ttc_objective, ttc_predict, unified_objective, unified_predict,
    FormReport, FormRow, GammaMode, TrainingPoint, TtcForm, UnifiedPoint,
};
pub use parabola::{extract_power_laws, fit_parabola, fit_power_law, OptimaPowerLaws, ParabolaAxis, ParabolaFit, PowerLaw};

use std::collections::BTreeMap;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

/// Huber delta shared by every fit so objectives stay comparable.
pub const HUBER_DELTA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("too few points: have {have}, need {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("degenerate inputs: {0}")]
    Degenerate(String),
    #[error("bad data: {0}")]
    BadData(String),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
}

/// Huber loss: r^2/2 inside |r| <= delta, linear outside.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// d huber / d residual.
pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        residual
    } else {
        delta * residual.signum()
    }
}

/// One training-law observation as serialized to JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub mu_rec: u32,
    pub tokens: f64,
    pub flops: f64,
    pub loss: f64,
    /// Effective parameter count N(mu_rec); derivable from a model config
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_effective: Option<f64>,
}

/// One test-time scaling curve: losses over depths for a model trained at
/// `mu_rec` on `tokens` tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestTimeCurve {
    pub mu_rec: u32,
    pub tokens: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_effective: Option<f64>,
    pub points: Vec<TtcPoint>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TtcPoint {
    pub t: u32,
    pub loss: f64,
}

impl TestTimeCurve {
    pub fn validate(&self) -> Result<(), FitError> {
        let mut prev = 0u32;
        for p in &self.points {
            if p.t < 1 || p.t <= prev && prev != 0 {
                return Err(FitError::BadData(format!(
                    "depths must be strictly increasing integers >= 1, got {}",
                    p.t
                )));
            }
            if p.loss <= 0.0 {
                return Err(FitError::BadData(format!("loss must be positive, got {}", p.loss)));
            }
            prev = p.t;
        }
        Ok(())
    }
}

/// Parses one JSON object per line, reporting the 1-indexed offending line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, FitError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line)
            .map_err(|e| FitError::Jsonl { line: i + 1, message: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

/// Serializes records as one JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("fit records serialize"));
        out.push('\n');
    }
    out
}

/// Fitted coefficients of one law plus the achieved objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub law: String,
    pub coefficients: BTreeMap<String, f64>,
    /// Summed Huber objective over all points.
    pub objective_sum: f64,
    /// Mean Huber objective per point.
    pub objective_mean: f64,
    pub restarts_used: u32,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flagged: Option<String>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> f64 {
        *self
            .coefficients
            .get(name)
            .unwrap_or_else(|| panic!("fit result {} has no coefficient {name}", self.law))
    }
}

/// Restart budget and optimizer settings for a fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub restarts: u32,
    pub seed: u64,
    pub lbfgs: lbfgs::LbfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        // Best of 500 random L-BFGS restarts, each capped at 10k iterations.
        Self { restarts: 500, seed: 0xf17, lbfgs: lbfgs::LbfgsOptions::default() }
    }
}

impl FitOptions {
    pub fn quick(restarts: u32, seed: u64) -> Self {
        Self { restarts, seed, lbfgs: lbfgs::LbfgsOptions::default() }
    }
}
