//! Linear time-invariant surrogate of the residual stream.
//!
//! The recurrent update of a looped model linearizes to h' = A_bar h + B_bar e.
//! This module holds the continuous parameterization, its discretization,
//! spectral-radius computation, stability classification, and exact rollouts
//! of the linear system. All functions here are pure value-level math; the
//! differentiable twin of `discretize` lives in the model's forward pass and
//! is held equivalent by test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

/// Classification threshold around rho = 1.
pub const STABILITY_TOL: f64 = 1e-9;

/// Largest double strictly below one. exp(-x) for tiny positive x rounds to
/// 1.0 under round-to-nearest even though the true value is below one; the
/// discretization clamps to this constant so the strict spectral guarantee
/// survives in floating point. Symmetrically, exp(-x) underflows to 0.0 for
/// huge x, so entries are floored at the smallest positive normal to keep
/// A_bar inside the open interval (0, 1).
pub const A_BAR_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
pub const A_BAR_MIN: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("spectral radius is undefined for a negative input rho = {0}")]
    NegativeRho(f64),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("power iteration did not converge and the {dim}x{dim} matrix exceeds the dense fallback limit")]
    NonConvergent { dim: usize },
    #[error("fixed point undefined: A_bar has an entry equal to 1")]
    MarginalFixedPoint,
    #[error("injection weights malformed for {mode}: {details}")]
    BadWeights { mode: &'static str, details: String },
}

/// Input-injection mechanism of the recurrent unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    Addition,
    Concatenation,
    ParcaeDiagonal,
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InjectionMode::Addition => "addition",
            InjectionMode::Concatenation => "concatenation",
            InjectionMode::ParcaeDiagonal => "parcae-diagonal",
        };
        f.write_str(s)
    }
}

/// Continuous-form dynamical-system parameters: A = Diag(-exp(log_a)),
/// step sizes Delta = softplus(delta_raw), input matrix B, readout C.
#[derive(Debug, Clone)]
pub struct InjectionParams {
    pub log_a: Vec<f64>,
    pub delta_raw: Vec<f64>,
    /// [d_h, d_e]
    pub b: Tensor,
    /// [d_c, d_h]
    pub c: Tensor,
}

impl InjectionParams {
    /// Initialization: effective Delta uniform in [0.01, 0.1], log_a uniform
    /// in [ln 0.5, ln 2], B and C scaled-normal like other linear layers.
    pub fn init(d_h: usize, d_e: usize, d_c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let log_a: Vec<f64> =
            (0..d_h).map(|_| rng::uniform(&mut r, 0.5_f64.ln(), 2.0_f64.ln())).collect();
        let delta_raw: Vec<f64> = (0..d_h)
            .map(|_| inverse_softplus(rng::uniform(&mut r, 0.01, 0.1)))
            .collect();
        let sigma = (2.0 / (5.0 * d_h as f64)).sqrt();
        let b = Tensor::matrix(d_h, d_e, rng::normal_vec(&mut r, d_h * d_e, sigma))
            .expect("finite init");
        let c = Tensor::matrix(d_c, d_h, rng::normal_vec(&mut r, d_c * d_h, sigma))
            .expect("finite init");
        Self { log_a, delta_raw, b, c }
    }

    pub fn d_h(&self) -> usize {
        self.log_a.len()
    }

    /// Effective step sizes, strictly positive elementwise.
    pub fn delta(&self) -> Vec<f64> {
        self.delta_raw.iter().map(|&x| softplus(x)).collect()
    }
}

/// Discrete system: diagonal A_bar (entries in (0, 1) when produced by
/// `discretize`) and dense B_bar = Delta .* B rowwise.
#[derive(Debug, Clone)]
pub struct DiscretizedSystem {
    pub a_bar: Vec<f64>,
    /// [d_h, d_e]
    pub b_bar: Tensor,
}

impl DiscretizedSystem {
    /// Builds a system from raw values, bypassing the stable parameterization.
    /// Used to study baselines and planted-instability cases.
    pub fn from_raw(a_bar: Vec<f64>, b_bar: Tensor) -> Self {
        Self { a_bar, b_bar }
    }
}

/// Zero-order hold on the diagonal A, Euler on B:
/// A_bar[i] = exp(-Delta[i] * exp(log_a[i])), B_bar = Delta .* B (rowwise).
pub fn discretize(params: &InjectionParams) -> DiscretizedSystem {
    let delta = params.delta();
    let a_bar: Vec<f64> = params
        .log_a
        .iter()
        .zip(&delta)
        .map(|(&la, &dt)| (-dt * la.exp()).exp().clamp(A_BAR_MIN, A_BAR_MAX))
        .collect();
    let d_h = params.d_h();
    let d_e = params.b.shape()[1];
    let mut b_bar = vec![0.0; d_h * d_e];
    for i in 0..d_h {
        for j in 0..d_e {
            b_bar[i * d_e + j] = delta[i] * params.b.get2(i, j);
        }
    }
    DiscretizedSystem {
        a_bar,
        b_bar: Tensor::matrix(d_h, d_e, b_bar).expect("finite discretization"),
    }
}

/// Stability regime of a discrete LTI system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityRegime {
    Stable,
    MarginallyStable,
    Unstable,
}

impl std::fmt::Display for StabilityRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StabilityRegime::Stable => "stable",
            StabilityRegime::MarginallyStable => "marginally-stable",
            StabilityRegime::Unstable => "unstable",
        };
        f.write_str(s)
    }
}

/// stable iff rho < 1 - tol; marginal iff |rho - 1| <= tol; unstable above.
pub fn classify(rho: f64) -> Result<StabilityRegime, DynamicsError> {
    if rho < 0.0 {
        return Err(DynamicsError::NegativeRho(rho));
    }
    Ok(if rho < 1.0 - STABILITY_TOL {
        StabilityRegime::Stable
    } else if (rho - 1.0).abs() <= STABILITY_TOL {
        StabilityRegime::MarginallyStable
    } else {
        StabilityRegime::Unstable
    })
}

/// The linearized transition matrix of an injection mode. Diagonal systems
/// keep their exact representation so the spectral radius is exact.
#[derive(Debug, Clone)]
pub enum TransitionMatrix {
    Diag(Vec<f64>),
    Dense(Tensor),
}

impl TransitionMatrix {
    pub fn dim(&self) -> usize {
        match self {
            TransitionMatrix::Diag(d) => d.len(),
            TransitionMatrix::Dense(t) => t.shape()[0],
        }
    }

    pub fn spectral_radius(&self) -> Result<f64, DynamicsError> {
        match self {
            TransitionMatrix::Diag(d) => Ok(spectral_radius_diag(d)),
            TransitionMatrix::Dense(t) => spectral_radius(t),
        }
    }
}

/// Exact spectral radius of a diagonal matrix.
pub fn spectral_radius_diag(diag: &[f64]) -> f64 {
    diag.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}

const POWER_ITER_CAP: usize = 4096;
const DENSE_FALLBACK_DIM: usize = 64;

/// Spectral radius of a general square matrix. Power iteration (v <- Mv with
/// per-step normalization, tracking the growth rate) handles the common
/// real-dominant case; a complex dominant pair makes the growth estimate
/// oscillate, in which case a dense eigensolver takes over for dim <= 64.
pub fn spectral_radius(m: &Tensor) -> Result<f64, DynamicsError> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(DynamicsError::NotSquare {
            rows: s.first().copied().unwrap_or(0),
            cols: s.get(1).copied().unwrap_or(0),
        });
    }
    let n = s[0];
    if n == 0 {
        return Ok(0.0);
    }
    let mv = m.data();

    let mut r = rng::stream(0x9e37_79b9);
    let mut v = rng::normal_vec(&mut r, n, 1.0);
    normalize(&mut v);

    let mut prev_window = f64::NAN;
    let mut log_acc = 0.0;
    let window = 64;
    let mut next = vec![0.0; n];
    for iter in 1..=POWER_ITER_CAP {
        mat_vec(mv, &v, &mut next, n);
        let growth = norm(&next);
        if growth == 0.0 || !growth.is_finite() {
            // Degenerate direction (nilpotent chain or overflow): decide densely.
            return dense_spectral_radius(m);
        }
        for (vi, ni) in v.iter_mut().zip(&next) {
            *vi = ni / growth;
        }
        log_acc += growth.ln();
        if iter % window == 0 {
            let est = (log_acc / window as f64).exp();
            log_acc = 0.0;
            if prev_window.is_finite() {
                let scale = est.abs().max(1e-300);
                if (est - prev_window).abs() / scale < 1e-9 {
                    return Ok(est);
                }
            }
            prev_window = est;
        }
    }
    if n <= DENSE_FALLBACK_DIM {
        dense_spectral_radius(m)
    } else {
        Err(DynamicsError::NonConvergent { dim: n })
    }
}

/// Dense eigensolver route (QR iteration via nalgebra); exact oracle for
/// small matrices and the fallback for degenerate spectra.
pub fn dense_spectral_radius(m: &Tensor) -> Result<f64, DynamicsError> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(DynamicsError::NotSquare {
            rows: s.first().copied().unwrap_or(0),
            cols: s.get(1).copied().unwrap_or(0),
        });
    }
    let n = s[0];
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    let eig = dm.complex_eigenvalues();
    Ok(eig.iter().fold(0.0_f64, |acc, z| acc.max(z.norm())))
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    } else {
        v[0] = 1.0;
    }
}

/// The (A_bar, B_bar) pair of the linearized update for each injection mode.
#[derive(Debug, Clone)]
pub struct LinearizedInjection {
    pub a_bar: TransitionMatrix,
    pub b_bar: Tensor,
}

/// Mode-specific weights feeding the recast.
#[derive(Debug, Clone)]
pub enum InjectionWeights<'a> {
    /// h' = h + e: identity transition and input matrices.
    Addition { d_h: usize },
    /// h' = W [h; e]: W = [W1 | W2] split at column d_h.
    Concatenation { w: &'a Tensor },
    /// The diagonal state-space form; delegates to `discretize`.
    ParcaeDiagonal { params: &'a InjectionParams },
}

/// Recasts an injection mechanism as the (A_bar, B_bar) of the linearized
/// system, enabling spectral tracking of trained checkpoints.
pub fn recast_injection(weights: InjectionWeights<'_>) -> Result<LinearizedInjection, DynamicsError> {
    match weights {
        InjectionWeights::Addition { d_h } => Ok(LinearizedInjection {
            a_bar: TransitionMatrix::Diag(vec![1.0; d_h]),
            b_bar: identity(d_h),
        }),
        InjectionWeights::Concatenation { w } => {
            let s = w.shape();
            if s.len() != 2 || s[1] <= s[0] {
                return Err(DynamicsError::BadWeights {
                    mode: "concatenation",
                    details: format!("need [d_h, d_h + d_e] with d_e >= 1, got {s:?}"),
                });
            }
            let d_h = s[0];
            let d_e = s[1] - d_h;
            let mut w1 = vec![0.0; d_h * d_h];
            let mut w2 = vec![0.0; d_h * d_e];
            for i in 0..d_h {
                for j in 0..d_h {
                    w1[i * d_h + j] = w.get2(i, j);
                }
                for j in 0..d_e {
                    w2[i * d_e + j] = w.get2(i, d_h + j);
                }
            }
            Ok(LinearizedInjection {
                a_bar: TransitionMatrix::Dense(Tensor::matrix(d_h, d_h, w1).expect("finite")),
                b_bar: Tensor::matrix(d_h, d_e, w2).expect("finite"),
            })
        }
        InjectionWeights::ParcaeDiagonal { params } => {
            let sys = discretize(params);
            Ok(LinearizedInjection {
                a_bar: TransitionMatrix::Diag(sys.a_bar),
                b_bar: sys.b_bar,
            })
        }
    }
}

fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::matrix(n, n, data).expect("finite identity")
}

/// Closed-form fixed point of the diagonal system: h*[i] = (B_bar e)[i] / (1 - a_bar[i]).
pub fn linear_fixed_point(sys: &DiscretizedSystem, e: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    if sys.a_bar.contains(&1.0) {
        return Err(DynamicsError::MarginalFixedPoint);
    }
    let be = apply_b(sys, e);
    Ok(be.iter().zip(&sys.a_bar).map(|(&b, &a)| b / (1.0 - a)).collect())
}

fn apply_b(sys: &DiscretizedSystem, e: &[f64]) -> Vec<f64> {
    let d_h = sys.a_bar.len();
    let d_e = sys.b_bar.shape()[1];
    debug_assert_eq!(e.len(), d_e);
    (0..d_h)
        .map(|i| e.iter().enumerate().map(|(j, &ej)| sys.b_bar.get2(i, j) * ej).sum())
        .collect()
}

/// Trajectory of an exact linear rollout, including per-step state norms.
#[derive(Debug, Clone)]
pub struct SimTrajectory {
    /// h_0 .. h_T (length T + 1).
    pub states: Vec<Vec<f64>>,
    /// ||h_t||_2 for each state.
    pub norms: Vec<f64>,
}

/// Rolls h_{t+1} = A_bar h_t + B_bar e for T steps.
pub fn simulate_linear(sys: &DiscretizedSystem, e: &[f64], h0: &[f64], t_steps: usize) -> SimTrajectory {
    let be = apply_b(sys, e);
    let mut states = Vec::with_capacity(t_steps + 1);
    let mut norms = Vec::with_capacity(t_steps + 1);
    let mut h = h0.to_vec();
    norms.push(norm(&h));
    states.push(h.clone());
    for _ in 0..t_steps {
        for i in 0..h.len() {
            h[i] = sys.a_bar[i] * h[i] + be[i];
        }
        norms.push(norm(&h));
        states.push(h.clone());
    }
    SimTrajectory { states, norms }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus: ln(e^y - 1), valid for y > 0.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}
