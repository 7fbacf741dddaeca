//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Two-loop recursion over the last `memory` (s, y) pairs; the line search is
//! the bracket/zoom scheme with cubic-safeguarded bisection. Objectives
//! return the value and fill the gradient in one call; non-finite values are
//! treated as infinitely bad so the search backs off rather than aborting.

use crate::rng;
use rand::Rng;

/// Objective: value at x, gradient written into `grad`.
pub trait Objective: Sync {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> Objective for F {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    /// How many times a failed line search may restart from a perturbed
    /// point before giving up.
    pub max_restarts: u32,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iters: 10_000, memory: 10, grad_tol: 1e-10, max_restarts: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Line-search failures recovered by perturbed restarts.
    pub restarts: u32,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Minimizes `f` from `x0`. Terminates on gradient norm below tolerance or
/// the iteration cap.
pub fn minimize<O: Objective>(f: &O, x0: &[f64], opts: &LbfgsOptions) -> LbfgsOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut value = f.eval(&x, &mut grad);
    if !value.is_finite() {
        // Hopeless start; report as-is.
        return LbfgsOutcome {
            x,
            value,
            grad_norm: f64::NAN,
            iterations: 0,
            converged: false,
            restarts: 0,
        };
    }
    let mut pairs: Vec<Pair> = Vec::new();
    let mut restarts = 0u32;
    let mut perturb_stream = rng::stream(0x1b_f65);
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let gnorm = norm(&grad);
        if gnorm < opts.grad_tol {
            return LbfgsOutcome { x, value, grad_norm: gnorm, iterations, converged: true, restarts };
        }
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; pairs.len()];
        for (i, p) in pairs.iter().enumerate().rev() {
            let a = p.rho * dot(&p.s, &d);
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(&p.y) {
                *dj -= a * yj;
            }
        }
        if let Some(last) = pairs.last() {
            let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
            if gamma.is_finite() && gamma > 0.0 {
                for dj in d.iter_mut() {
                    *dj *= gamma;
                }
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            let beta = p.rho * dot(&p.y, &d);
            for (dj, sj) in d.iter_mut().zip(&p.s) {
                *dj += (alphas[i] - beta) * sj;
            }
        }
        let mut slope = dot(&grad, &d);
        if slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            d = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            pairs.clear();
        }

        match strong_wolfe(f, &x, value, &grad, &d, slope) {
            Some(ls) => {
                let mut s = vec![0.0; n];
                let mut y = vec![0.0; n];
                for i in 0..n {
                    s[i] = ls.alpha * d[i];
                    y[i] = ls.grad[i] - grad[i];
                }
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    pairs.push(Pair { s, y, rho: 1.0 / sy });
                    if pairs.len() > opts.memory {
                        pairs.remove(0);
                    }
                }
                for i in 0..n {
                    x[i] += ls.alpha * d[i];
                }
                value = ls.value;
                grad = ls.grad;
            }
            None => {
                // Line-search failure: perturb and restart, counted.
                restarts += 1;
                if restarts > opts.max_restarts {
                    break;
                }
                let scale = 1e-6 * (1.0 + norm(&x));
                for xi in x.iter_mut() {
                    *xi += scale * (perturb_stream.gen::<f64>() - 0.5);
                }
                value = f.eval(&x, &mut grad);
                if !value.is_finite() {
                    break;
                }
                pairs.clear();
            }
        }
        iterations += 1;
    }
    let gnorm = norm(&grad);
    LbfgsOutcome { x, value, grad_norm: gnorm, iterations, converged: gnorm < opts.grad_tol, restarts }
}

struct LineSearchResult {
    alpha: f64,
    value: f64,
    grad: Vec<f64>,
}

/// Strong-Wolfe bracket + zoom (sufficient decrease c1, curvature c2).
fn strong_wolfe<O: Objective>(
    f: &O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    slope0: f64,
) -> Option<LineSearchResult> {
    let n = x.len();
    let eval_at = |alpha: f64, grad: &mut Vec<f64>| -> (f64, f64) {
        let xt: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
        let v = f.eval(&xt, grad);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        let dphi = if v.is_finite() { dot(grad, d) } else { f64::INFINITY };
        (v, dphi)
    };
    let _ = g0;

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = slope0;
    let mut alpha = 1.0;
    let mut grad = vec![0.0; n];

    for iter in 0..25 {
        let (fi, dphi) = eval_at(alpha, &mut grad);
        if fi > f0 + C1 * alpha * slope0 || (iter > 0 && fi >= f_prev) {
            return zoom(f, x, f0, slope0, d, alpha_prev, f_prev, dphi_prev, alpha, fi, dphi);
        }
        if dphi.abs() <= -C2 * slope0 {
            return Some(LineSearchResult { alpha, value: fi, grad });
        }
        if dphi >= 0.0 {
            return zoom(f, x, f0, slope0, d, alpha, fi, dphi, alpha_prev, f_prev, dphi_prev);
        }
        alpha_prev = alpha;
        f_prev = fi;
        dphi_prev = dphi;
        alpha = (alpha * 2.0).min(1e6);
        if alpha >= 1e6 {
            break;
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<O: Objective>(
    f: &O,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    mut alpha_lo: f64,
    mut f_lo: f64,
    mut dphi_lo: f64,
    mut alpha_hi: f64,
    mut f_hi: f64,
    mut dphi_hi: f64,
) -> Option<LineSearchResult> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    for _ in 0..40 {
        // Cubic interpolation between lo and hi, safeguarded by bisection.
        let alpha = cubic_min(alpha_lo, f_lo, dphi_lo, alpha_hi, f_hi, dphi_hi)
            .filter(|a| {
                let (lo, hi) = if alpha_lo < alpha_hi { (alpha_lo, alpha_hi) } else { (alpha_hi, alpha_lo) };
                let margin = 0.1 * (hi - lo);
                a.is_finite() && *a > lo + margin && *a < hi - margin
            })
            .unwrap_or(0.5 * (alpha_lo + alpha_hi));

        let xt: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
        let fi_raw = f.eval(&xt, &mut grad);
        let fi = if fi_raw.is_finite() { fi_raw } else { f64::INFINITY };
        let dphi = if fi_raw.is_finite() { dot(&grad, d) } else { f64::INFINITY };

        if fi > f0 + C1 * alpha * slope0 || fi >= f_lo {
            alpha_hi = alpha;
            f_hi = fi;
            dphi_hi = dphi;
        } else {
            if dphi.abs() <= -C2 * slope0 {
                return Some(LineSearchResult { alpha, value: fi, grad });
            }
            if dphi * (alpha_hi - alpha_lo) >= 0.0 {
                alpha_hi = alpha_lo;
                f_hi = f_lo;
                dphi_hi = dphi_lo;
            }
            alpha_lo = alpha;
            f_lo = fi;
            dphi_lo = dphi;
        }
        if (alpha_hi - alpha_lo).abs() < 1e-16 * alpha_lo.abs().max(1.0) {
            break;
        }
    }
    // Accept the best bracketed point if it at least decreases sufficiently.
    if f_lo < f0 + C1 * alpha_lo * slope0 && alpha_lo > 0.0 {
        let xt: Vec<f64> = (0..n).map(|i| x[i] + alpha_lo * d[i]).collect();
        let v = f.eval(&xt, &mut grad);
        if v.is_finite() {
            return Some(LineSearchResult { alpha: alpha_lo, value: v, grad });
        }
    }
    None
}

fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    if !(fa.is_finite() && fb.is_finite() && da.is_finite() && db.is_finite()) {
        return None;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = disc.sqrt() * (b - a).signum();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    Some(b - (b - a) * (db + d2 - d1) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges_in_a_couple_of_iterations() {
        let c = [3.0, -1.5, 0.25, 7.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = x[i] - c[i];
                v += 0.5 * (x[i] - c[i]) * (x[i] - c[i]);
            }
            v
        };
        let out = minimize(&f, &[0.0; 4], &LbfgsOptions::default());
        assert!(out.converged);
        assert!(out.iterations <= 6, "iterations {}", out.iterations);
        for (got, want) in out.x.iter().zip(&c) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rosenbrock_reaches_the_known_optimum() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a) * (1.0 - a) + 100.0 * (b - a * a) * (b - a * a)
        };
        let out = minimize(&f, &[-1.2, 1.0], &LbfgsOptions::default());
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn non_finite_regions_are_avoided() {
        // f = -ln(1 - x^2): infinite outside (-1, 1).
        let f = |x: &[f64], g: &mut [f64]| {
            let v = 1.0 - x[0] * x[0];
            if v <= 0.0 {
                g[0] = f64::NAN;
                return f64::INFINITY;
            }
            g[0] = 2.0 * x[0] / v;
            -v.ln()
        };
        let out = minimize(&f, &[0.9], &LbfgsOptions::default());
        assert!(out.converged);
        assert!(out.x[0].abs() < 1e-8);
    }
}
