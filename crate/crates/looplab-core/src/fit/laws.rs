//! Parametric scaling laws and their fitting drivers.
//!
//! Internal optimizer parameterizations keep positive coefficients in log
//! space (E, X, Y, Z, L_inf via exp), so L-BFGS runs unconstrained; exponents
//! stay raw. Restart initialization ranges: floors ~ U(0.5, 5), exponents ~
//! U(0.1, 1.2), log-coefficients ~ U(0, 14).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsOutcome};
use super::{huber, huber_grad, FitError, FitOptions, FitResult, TtcPoint, HUBER_DELTA};
use crate::rng;

/// One resolved training-law observation.
#[derive(Debug, Clone, Copy)]
pub struct TrainingPoint {
    pub n_eff: f64,
    pub tokens: f64,
    pub loss: f64,
}

/// One resolved unified-law observation.
#[derive(Debug, Clone, Copy)]
pub struct UnifiedPoint {
    pub n_eff: f64,
    pub tokens: f64,
    pub mu_rec: u32,
    pub t: u32,
    pub loss: f64,
}

/// Test-time decay functional forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtcForm {
    /// L_inf + Z e^{-zT}
    ExpDecay,
    /// L_inf + Z (1+T)^{-z}
    ShiftedPower,
    /// L_inf + Z T^{-z}
    Power,
    /// Z T^{-z}
    PowerNoFloor,
}

impl TtcForm {
    pub const ALL: [TtcForm; 4] =
        [TtcForm::ExpDecay, TtcForm::ShiftedPower, TtcForm::Power, TtcForm::PowerNoFloor];

    pub fn name(&self) -> &'static str {
        match self {
            TtcForm::ExpDecay => "exp-decay",
            TtcForm::ShiftedPower => "shifted-power",
            TtcForm::Power => "power",
            TtcForm::PowerNoFloor => "power-no-floor",
        }
    }

    fn dim(&self) -> usize {
        match self {
            TtcForm::PowerNoFloor => 2,
            _ => 3,
        }
    }

    fn min_points(&self) -> usize {
        match self {
            TtcForm::PowerNoFloor => 3,
            _ => 4,
        }
    }
}

impl std::fmt::Display for TtcForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether the unified law's depth-conditioning exponent is fitted or pinned
/// at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    Fixed,
    Learned,
}

// ---------------------------------------------------------------------------
// Restart driver
// ---------------------------------------------------------------------------

struct Best {
    outcome: LbfgsOutcome,
    restarts_used: u32,
}

/// Best-of-k restarts with deterministic (objective, index) selection.
fn best_of_restarts<O, S>(objective: &O, sampler: S, opts: &FitOptions) -> Best
where
    O: lbfgs::Objective,
    S: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<f64> + Sync,
{
    let restarts = opts.restarts.max(1);
    let outcomes: Vec<(u32, LbfgsOutcome)> = (0..restarts)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(rng::derive_seed(opts.seed, &[0xf17, i as u64]));
            let x0 = sampler(&mut r);
            (i, lbfgs::minimize(objective, &x0, &opts.lbfgs))
        })
        .collect();
    let best = outcomes
        .into_iter()
        .min_by(|(ia, a), (ib, b)| {
            let fa = if a.value.is_finite() { a.value } else { f64::INFINITY };
            let fb = if b.value.is_finite() { b.value } else { f64::INFINITY };
            fa.partial_cmp(&fb).unwrap().then(ia.cmp(ib))
        })
        .map(|(_, o)| o)
        .expect("at least one restart");
    Best { outcome: best, restarts_used: restarts }
}

fn result_from(
    law: &str,
    coefficients: BTreeMap<String, f64>,
    best: Best,
    n_points: usize,
) -> FitResult {
    FitResult {
        law: law.to_string(),
        coefficients,
        objective_sum: best.outcome.value,
        objective_mean: best.outcome.value / n_points as f64,
        restarts_used: best.restarts_used,
        converged: best.outcome.converged,
        flagged: (!best.outcome.converged)
            .then(|| format!("not converged: grad norm {:.3e}", best.outcome.grad_norm)),
    }
}

// ---------------------------------------------------------------------------
// Training law: L(N, D) = E + X N^-x + Y D^-y
// ---------------------------------------------------------------------------

fn training_pred_grad(theta: &[f64], n: f64, d: f64) -> (f64, [f64; 5]) {
    let e = theta[0].exp();
    let x_coef = theta[1].exp();
    let x_exp = theta[2];
    let y_coef = theta[3].exp();
    let y_exp = theta[4];
    let n_term = x_coef * (-x_exp * n.ln()).exp();
    let d_term = y_coef * (-y_exp * d.ln()).exp();
    let pred = e + n_term + d_term;
    (pred, [e, n_term, -n.ln() * n_term, d_term, -d.ln() * d_term])
}

/// Fits (E, X, x, Y, y) by Huber-on-log-residual L-BFGS restarts.
pub fn fit_training_law(points: &[TrainingPoint], opts: &FitOptions) -> Result<FitResult, FitError> {
    if points.len() < 6 {
        return Err(FitError::TooFewPoints { have: points.len(), need: 6 });
    }
    let distinct = |f: fn(&TrainingPoint) -> f64| {
        let mut vals: Vec<f64> = points.iter().map(f).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals.len()
    };
    if distinct(|p| p.n_eff) < 2 || distinct(|p| p.tokens) < 2 {
        return Err(FitError::Degenerate(
            "training-law records must span at least 2 values of N(mu_rec) and of D".into(),
        ));
    }
    for p in points {
        if p.loss <= 0.0 || p.tokens < 1.0 || p.n_eff <= 0.0 {
            return Err(FitError::BadData(format!("bad record {p:?}")));
        }
    }

    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.fill(0.0);
        let mut total = 0.0;
        for p in points {
            let (pred, dpred) = training_pred_grad(theta, p.n_eff, p.tokens);
            let r = pred.ln() - p.loss.ln();
            total += huber(r, HUBER_DELTA);
            let w = huber_grad(r, HUBER_DELTA) / pred;
            for (g, dp) in grad.iter_mut().zip(&dpred) {
                *g += w * dp;
            }
        }
        total
    };
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| {
        vec![
            rng::uniform(r, 0.5, 5.0).ln(),
            rng::uniform(r, 0.0, 14.0),
            rng::uniform(r, 0.1, 1.2),
            rng::uniform(r, 0.0, 14.0),
            rng::uniform(r, 0.1, 1.2),
        ]
    };
    let best = best_of_restarts(&objective, sampler, opts);
    let theta = &best.outcome.x;
    let coefficients = BTreeMap::from([
        ("E".to_string(), theta[0].exp()),
        ("X".to_string(), theta[1].exp()),
        ("x".to_string(), theta[2]),
        ("Y".to_string(), theta[3].exp()),
        ("y".to_string(), theta[4]),
    ]);
    Ok(result_from("training-law", coefficients, best, points.len()))
}

/// L(N, D) at fitted coefficients.
pub fn training_law_predict(c: &BTreeMap<String, f64>, n_eff: f64, tokens: f64) -> f64 {
    c["E"] + c["X"] * n_eff.powf(-c["x"]) + c["Y"] * tokens.powf(-c["y"])
}

/// Independent objective re-evaluation at fitted coefficients: (sum, mean).
pub fn training_law_objective(c: &BTreeMap<String, f64>, points: &[TrainingPoint]) -> (f64, f64) {
    let sum = points
        .iter()
        .map(|p| huber(training_law_predict(c, p.n_eff, p.tokens).ln() - p.loss.ln(), HUBER_DELTA))
        .sum::<f64>();
    (sum, sum / points.len() as f64)
}

// ---------------------------------------------------------------------------
// Test-time decay forms
// ---------------------------------------------------------------------------

/// (pred, dpred/dtheta) for a form; theta layout is [ln L_inf, ln Z, z] or
/// [ln Z, z] for the no-floor form.
fn ttc_pred_grad(form: TtcForm, theta: &[f64], t: f64) -> (f64, [f64; 3]) {
    match form {
        TtcForm::ExpDecay => {
            let l_inf = theta[0].exp();
            let z_coef = theta[1].exp();
            let decay = (-theta[2] * t).exp();
            (l_inf + z_coef * decay, [l_inf, z_coef * decay, -t * z_coef * decay])
        }
        TtcForm::ShiftedPower => {
            let l_inf = theta[0].exp();
            let z_coef = theta[1].exp();
            let base = (1.0 + t).ln();
            let decay = (-theta[2] * base).exp();
            (l_inf + z_coef * decay, [l_inf, z_coef * decay, -base * z_coef * decay])
        }
        TtcForm::Power => {
            let l_inf = theta[0].exp();
            let z_coef = theta[1].exp();
            let base = t.ln();
            let decay = (-theta[2] * base).exp();
            (l_inf + z_coef * decay, [l_inf, z_coef * decay, -base * z_coef * decay])
        }
        TtcForm::PowerNoFloor => {
            let z_coef = theta[0].exp();
            let base = t.ln();
            let decay = (-theta[1] * base).exp();
            (z_coef * decay, [z_coef * decay, -base * z_coef * decay, 0.0])
        }
    }
}

/// Fits one curve with the given functional form.
pub fn fit_ttc(points: &[TtcPoint], form: TtcForm, opts: &FitOptions) -> Result<FitResult, FitError> {
    if points.len() < form.min_points() {
        return Err(FitError::TooFewPoints { have: points.len(), need: form.min_points() });
    }
    for p in points {
        if p.loss <= 0.0 || p.t < 1 {
            return Err(FitError::BadData(format!("bad curve point {p:?}")));
        }
    }
    let dim = form.dim();
    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.fill(0.0);
        let mut total = 0.0;
        for p in points {
            let (pred, dpred) = ttc_pred_grad(form, theta, p.t as f64);
            let r = pred.ln() - p.loss.ln();
            total += huber(r, HUBER_DELTA);
            let w = huber_grad(r, HUBER_DELTA) / pred;
            for (g, dp) in grad.iter_mut().zip(dpred.iter().take(dim)) {
                *g += w * dp;
            }
        }
        total
    };
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut v = Vec::with_capacity(dim);
        if form != TtcForm::PowerNoFloor {
            v.push(rng::uniform(r, 0.5, 5.0).ln());
        }
        v.push(rng::uniform(r, 0.0, 14.0));
        v.push(rng::uniform(r, 0.1, 1.2));
        v
    };
    let best = best_of_restarts(&objective, sampler, opts);
    let theta = &best.outcome.x;
    let coefficients = match form {
        TtcForm::PowerNoFloor => BTreeMap::from([
            ("Z".to_string(), theta[0].exp()),
            ("z".to_string(), theta[1]),
        ]),
        _ => BTreeMap::from([
            ("L_inf".to_string(), theta[0].exp()),
            ("Z".to_string(), theta[1].exp()),
            ("z".to_string(), theta[2]),
        ]),
    };
    Ok(result_from(&format!("ttc-{}", form.name()), coefficients, best, points.len()))
}

/// L(T) at fitted coefficients.
pub fn ttc_predict(form: TtcForm, c: &BTreeMap<String, f64>, t: u32) -> f64 {
    let t = t as f64;
    match form {
        TtcForm::ExpDecay => c["L_inf"] + c["Z"] * (-c["z"] * t).exp(),
        TtcForm::ShiftedPower => c["L_inf"] + c["Z"] * (1.0 + t).powf(-c["z"]),
        TtcForm::Power => c["L_inf"] + c["Z"] * t.powf(-c["z"]),
        TtcForm::PowerNoFloor => c["Z"] * t.powf(-c["z"]),
    }
}

/// Independent objective re-evaluation: (sum, mean) Huber on log residuals.
pub fn ttc_objective(form: TtcForm, c: &BTreeMap<String, f64>, points: &[TtcPoint]) -> (f64, f64) {
    let sum = points
        .iter()
        .map(|p| huber(ttc_predict(form, c, p.t).ln() - p.loss.ln(), HUBER_DELTA))
        .sum::<f64>();
    (sum, sum / points.len() as f64)
}

// ---------------------------------------------------------------------------
// Unified law: L(T | mu_rec, D) = E + X N^-x + Y D^-y + Z exp(-z T mu^-gamma)
// ---------------------------------------------------------------------------

/// Fits the joint law over all curves' points; gamma is pinned at 1 or
/// learned per `gamma_mode`.
pub fn fit_unified(
    points: &[UnifiedPoint],
    gamma_mode: GammaMode,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    let dim = match gamma_mode {
        GammaMode::Fixed => 7,
        GammaMode::Learned => 8,
    };
    if points.len() < dim + 1 {
        return Err(FitError::TooFewPoints { have: points.len(), need: dim + 1 });
    }
    {
        let mut mus: Vec<u32> = points.iter().map(|p| p.mu_rec).collect();
        mus.sort_unstable();
        mus.dedup();
        if mus.len() < 2 {
            return Err(FitError::Degenerate("unified fit needs curves spanning >= 2 mu_rec values".into()));
        }
    }

    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.fill(0.0);
        let mut total = 0.0;
        let gamma = if dim == 8 { theta[7] } else { 1.0 };
        for p in points {
            let (train_pred, dtrain) = training_pred_grad(&theta[0..5], p.n_eff, p.tokens);
            let mu = p.mu_rec as f64;
            let t = p.t as f64;
            let z_coef = theta[5].exp();
            let mu_pow = (-gamma * mu.ln()).exp();
            let decay = (-theta[6] * t * mu_pow).exp();
            let tail = z_coef * decay;
            let pred = train_pred + tail;
            let r = pred.ln() - p.loss.ln();
            total += huber(r, HUBER_DELTA);
            let w = huber_grad(r, HUBER_DELTA) / pred;
            for (g, dp) in grad.iter_mut().take(5).zip(&dtrain) {
                *g += w * dp;
            }
            grad[5] += w * tail;
            grad[6] += w * (-t * mu_pow) * tail;
            if dim == 8 {
                grad[7] += w * tail * theta[6] * t * mu.ln() * mu_pow;
            }
        }
        total
    };
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut v = vec![
            rng::uniform(r, 0.5, 5.0).ln(),
            rng::uniform(r, 0.0, 14.0),
            rng::uniform(r, 0.1, 1.2),
            rng::uniform(r, 0.0, 14.0),
            rng::uniform(r, 0.1, 1.2),
            rng::uniform(r, 0.0, 14.0),
            rng::uniform(r, 0.1, 1.2),
        ];
        if dim == 8 {
            v.push(rng::uniform(r, 0.1, 1.2));
        }
        v
    };
    let best = best_of_restarts(&objective, sampler, opts);
    let theta = &best.outcome.x;
    let mut coefficients = BTreeMap::from([
        ("E".to_string(), theta[0].exp()),
        ("X".to_string(), theta[1].exp()),
        ("x".to_string(), theta[2]),
        ("Y".to_string(), theta[3].exp()),
        ("y".to_string(), theta[4]),
        ("Z".to_string(), theta[5].exp()),
        ("z".to_string(), theta[6]),
    ]);
    coefficients.insert(
        "gamma".to_string(),
        if dim == 8 { theta[7] } else { 1.0 },
    );
    Ok(result_from("unified", coefficients, best, points.len()))
}

/// Unified-law prediction at fitted coefficients.
pub fn unified_predict(c: &BTreeMap<String, f64>, n_eff: f64, tokens: f64, mu_rec: u32, t: u32) -> f64 {
    let floor = training_law_predict(c, n_eff, tokens);
    let mu = mu_rec as f64;
    floor + c["Z"] * (-c["z"] * t as f64 * mu.powf(-c["gamma"])).exp()
}

/// Independent objective re-evaluation: (sum, mean).
pub fn unified_objective(c: &BTreeMap<String, f64>, points: &[UnifiedPoint]) -> (f64, f64) {
    let sum = points
        .iter()
        .map(|p| {
            let pred = unified_predict(c, p.n_eff, p.tokens, p.mu_rec, p.t);
            huber(pred.ln() - p.loss.ln(), HUBER_DELTA)
        })
        .sum::<f64>();
    (sum, sum / points.len() as f64)
}

// ---------------------------------------------------------------------------
// Functional-form comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormRow {
    pub form: TtcForm,
    /// Mean Huber across curves, fit and evaluated on all depths.
    pub in_distribution: f64,
    /// Mean Huber across curves on held-out T > mu_rec, fit on T <= mu_rec.
    pub extrapolation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormReport {
    pub rows: Vec<FormRow>,
}

impl FormReport {
    pub fn row(&self, form: TtcForm) -> &FormRow {
        self.rows.iter().find(|r| r.form == form).expect("all forms present")
    }
}

/// Per-form mean Huber over curves, in-distribution and under extrapolation
/// split at each curve's mu_rec.
pub fn functional_form_report(
    curves: &[(u32, Vec<TtcPoint>)],
    opts: &FitOptions,
) -> Result<FormReport, FitError> {
    if curves.is_empty() {
        return Err(FitError::TooFewPoints { have: 0, need: 1 });
    }
    let mut rows = Vec::new();
    for form in TtcForm::ALL {
        let mut full_sum = 0.0;
        let mut extra_sum = 0.0;
        let mut extra_curves = 0usize;
        for (mu_rec, points) in curves {
            let fit = fit_ttc(points, form, opts)?;
            full_sum += ttc_objective(form, &fit.coefficients, points).1;

            let head: Vec<TtcPoint> =
                points.iter().copied().filter(|p| p.t <= *mu_rec).collect();
            let tail: Vec<TtcPoint> =
                points.iter().copied().filter(|p| p.t > *mu_rec).collect();
            if head.len() >= form.min_points() && !tail.is_empty() {
                let fit = fit_ttc(&head, form, opts)?;
                extra_sum += ttc_objective(form, &fit.coefficients, &tail).1;
                extra_curves += 1;
            }
        }
        rows.push(FormRow {
            form,
            in_distribution: full_sum / curves.len() as f64,
            extrapolation: if extra_curves > 0 { extra_sum / extra_curves as f64 } else { f64::NAN },
        });
    }
    Ok(FormReport { rows })
}
