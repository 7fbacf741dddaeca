//! Parabolic isoFLOP fits and power-law extraction from their minima.

use serde::{Deserialize, Serialize};

use super::FitError;

/// Whether the quadratic is fit against the raw x or its log10 (the isoFLOP
/// convention: sweeps live on log axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParabolaAxis {
    Linear,
    Log10,
}

/// Least-squares quadratic y = a u^2 + b u + c over u = x or log10(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParabolaFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub axis: ParabolaAxis,
    /// Minimum location in original x units; absent when the fit opens
    /// downward (a <= 0), which is flagged.
    pub min_location: Option<f64>,
    pub residual_ss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flagged: Option<String>,
}

/// Fits a quadratic to (x, loss) points and locates its minimum -b/2a.
pub fn fit_parabola(points: &[(f64, f64)], axis: ParabolaAxis) -> Result<ParabolaFit, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints { have: points.len(), need: 3 });
    }
    let us: Vec<f64> = points
        .iter()
        .map(|&(x, _)| match axis {
            ParabolaAxis::Linear => Ok(x),
            ParabolaAxis::Log10 => {
                if x <= 0.0 {
                    Err(FitError::BadData(format!("log axis needs positive x, got {x}")))
                } else {
                    Ok(x.log10())
                }
            }
        })
        .collect::<Result<_, _>>()?;

    // Normal equations over the monomial basis [u^2, u, 1].
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for (&u, &(_, y)) in us.iter().zip(points) {
        let powers = [1.0, u, u * u, u * u * u, u * u * u * u];
        for (k, p) in powers.iter().enumerate() {
            s[k] += p;
        }
        t[0] += y;
        t[1] += y * u;
        t[2] += y * u * u;
    }
    let mut m = [[s[4], s[3], s[2], t[2]], [s[3], s[2], s[1], t[1]], [s[2], s[1], s[0], t[0]]];

    // Gaussian elimination with partial pivoting.
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot_row);
        let pivot = m[col][col];
        let scale_ref = s[4].abs().max(s[0].abs()).max(1.0);
        if pivot.abs() < 1e-12 * scale_ref {
            return Err(FitError::Degenerate(
                "collinear or duplicated x values leave the quadratic underdetermined".into(),
            ));
        }
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / pivot;
                let (pivot_row, target) = if row < col {
                    let (a, b) = m.split_at_mut(col);
                    (&b[0], &mut a[row])
                } else {
                    let (a, b) = m.split_at_mut(row);
                    (&a[col], &mut b[0])
                };
                for (t, p) in target.iter_mut().zip(pivot_row).skip(col) {
                    *t -= f * p;
                }
            }
        }
    }
    let a = m[0][3] / m[0][0];
    let b = m[1][3] / m[1][1];
    let c = m[2][3] / m[2][2];

    let residual_ss: f64 = us
        .iter()
        .zip(points)
        .map(|(&u, &(_, y))| {
            let p = a * u * u + b * u + c;
            (p - y) * (p - y)
        })
        .sum();

    let (min_location, flagged) = if a > 0.0 {
        let u_star = -b / (2.0 * a);
        let x_star = match axis {
            ParabolaAxis::Linear => u_star,
            ParabolaAxis::Log10 => 10f64.powf(u_star),
        };
        (Some(x_star), None)
    } else {
        (None, Some(format!("non-convex fit (a = {a:.3e}); minimum rejected")))
    };
    Ok(ParabolaFit { a, b, c, axis, min_location, residual_ss, flagged })
}

/// y = coefficient * x^exponent via ordinary least squares in log-log space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerLaw {
    pub coefficient: f64,
    pub exponent: f64,
    pub residual_ss: f64,
}

impl PowerLaw {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficient * x.powf(self.exponent)
    }
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<PowerLaw, FitError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(FitError::TooFewPoints { have: xs.len(), need: 2 });
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(FitError::BadData("power-law fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(FitError::Degenerate("all x values identical".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let residual_ss = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let p = intercept + exponent * x;
            (p - y) * (p - y)
        })
        .sum();
    Ok(PowerLaw { coefficient: intercept.exp(), exponent, residual_ss })
}

/// The two isoFLOP optimum laws: mu*_rec(F) and D*(F).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimaPowerLaws {
    pub mu_law: PowerLaw,
    pub token_law: PowerLaw,
}

/// Fits both optimum power laws from parabola minima across FLOP budgets.
pub fn extract_power_laws(
    budgets: &[f64],
    mu_minima: &[f64],
    token_minima: &[f64],
) -> Result<OptimaPowerLaws, FitError> {
    if budgets.len() < 3 {
        return Err(FitError::TooFewPoints { have: budgets.len(), need: 3 });
    }
    Ok(OptimaPowerLaws {
        mu_law: fit_power_law(budgets, mu_minima)?,
        token_law: fit_power_law(budgets, token_minima)?,
    })
}
