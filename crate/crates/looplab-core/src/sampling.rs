//! Stochastic depth machinery: depth distributions, the baseline and
//! corrected truncation samplers, and batched per-sequence schedules.
//!
//! The corrected sampler draws the total depth T directly from the target
//! distribution and splits it into a no-grad prefix n and a grad suffix k;
//! the baseline sampler draws only the prefix and pins k, which shifts and
//! truncates the realized depth distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("baseline sampler needs mu_rec > mu_bwd, got {mu_rec} <= {mu_bwd}")]
    ShiftedMeanNotPositive { mu_rec: u32, mu_bwd: u32 },
}

/// Depth distribution family. Samples are integers >= 1: the
/// poisson-lognormal form adds one by definition, and plain Poisson draws of
/// zero are lifted to one (a model must loop at least once to read the
/// injected input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DepthDistribution {
    Poisson,
    PoissonLognormal {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

fn default_sigma() -> f64 {
    0.5
}

impl DepthDistribution {
    pub fn poisson_lognormal() -> Self {
        DepthDistribution::PoissonLognormal { sigma: default_sigma() }
    }

    /// One depth draw with mean parameter `mean`.
    pub fn sample<R: Rng>(&self, mean: f64, rng: &mut R) -> u32 {
        match *self {
            DepthDistribution::Poisson => poisson(mean, rng).max(1),
            DepthDistribution::PoissonLognormal { sigma } => {
                let tau = mean.ln() - 0.5 * sigma * sigma + sigma * rng::standard_normal(rng);
                poisson(tau.exp(), rng) + 1
            }
        }
    }
}

/// Poisson sampling by inversion of the CDF; adequate for desk-scale means.
fn poisson<R: Rng>(lambda: f64, rng: &mut R) -> u32 {
    debug_assert!(lambda > 0.0 && lambda.is_finite());
    let u: f64 = rng.gen();
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf && k < 100_000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// mu_bwd = ceil(mu_rec / 2).
pub fn mu_bwd_rule(mu_rec: u32) -> u32 {
    assert!(mu_rec >= 1);
    mu_rec.div_ceil(2)
}

/// Baseline split: n ~ Lambda(mu_rec - mu_bwd), k = mu_bwd. Reproduces the
/// distribution mismatch: the realized T = n + k never drops below
/// mu_bwd + 1.
pub fn sample_baseline<R: Rng>(
    mu_rec: u32,
    mu_bwd: u32,
    dist: DepthDistribution,
    rng: &mut R,
) -> Result<(u32, u32), SamplingError> {
    if mu_rec <= mu_bwd {
        return Err(SamplingError::ShiftedMeanNotPositive { mu_rec, mu_bwd });
    }
    let n = dist.sample((mu_rec - mu_bwd) as f64, rng);
    Ok((n, mu_bwd))
}

/// Corrected split: T ~ Lambda(mu_rec), n = max(T - mu_bwd, 0),
/// k = min(T, mu_bwd). The realized depth distribution is exactly Lambda.
pub fn sample_corrected<R: Rng>(
    mu_rec: u32,
    mu_bwd: u32,
    dist: DepthDistribution,
    rng: &mut R,
) -> (u32, u32) {
    let t = dist.sample(mu_rec as f64, rng);
    (t.saturating_sub(mu_bwd), t.min(mu_bwd))
}

/// One sequence's slot in a batched schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Per-sequence stream seed (drives both the depth draw and state init).
    pub seed: u64,
    /// Total recurrent steps.
    pub t: u32,
    /// No-grad prefix steps.
    pub n: u32,
    /// Grad suffix steps.
    pub k: u32,
    /// Idle steps before this sequence starts so all finish at t_max together.
    pub tau: u32,
}

/// Batch-aligned per-sequence depths: each sequence idles (state carry-over,
/// no update) for its first tau steps, then runs n no-grad steps and k grad
/// steps, finishing at the shared t_max.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthSchedule {
    pub t_max: u32,
    pub entries: Vec<ScheduleEntry>,
}

impl DepthSchedule {
    /// Corrected per-sequence sampling with counter-based streams so the
    /// schedule replays exactly for a given base seed.
    pub fn per_sequence(
        batch_size: usize,
        mu_rec: u32,
        mu_bwd: u32,
        dist: DepthDistribution,
        base_seed: u64,
    ) -> Self {
        assert!(batch_size >= 1);
        let mut entries = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let seed = rng::derive_seed(base_seed, &[0x5eed, i as u64]);
            let mut stream = rng::stream(seed);
            let (n, k) = sample_corrected(mu_rec, mu_bwd, dist, &mut stream);
            entries.push(ScheduleEntry { seed, t: n + k, n, k, tau: 0 });
        }
        Self::align(entries)
    }

    /// One depth draw shared by the whole micro-batch (all tau = 0).
    pub fn per_micro_batch(
        batch_size: usize,
        mu_rec: u32,
        mu_bwd: u32,
        dist: DepthDistribution,
        base_seed: u64,
    ) -> Self {
        assert!(batch_size >= 1);
        let shared = rng::derive_seed(base_seed, &[0x5eed, 0]);
        let mut stream = rng::stream(shared);
        let (n, k) = sample_corrected(mu_rec, mu_bwd, dist, &mut stream);
        let entries = (0..batch_size)
            .map(|i| ScheduleEntry {
                seed: rng::derive_seed(base_seed, &[0x5eed, i as u64]),
                t: n + k,
                n,
                k,
                tau: 0,
            })
            .collect();
        Self { t_max: n + k, entries }
    }

    /// Baseline-sampler variant of the per-sequence schedule.
    pub fn per_sequence_baseline(
        batch_size: usize,
        mu_rec: u32,
        mu_bwd: u32,
        dist: DepthDistribution,
        base_seed: u64,
    ) -> Result<Self, SamplingError> {
        assert!(batch_size >= 1);
        let mut entries = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let seed = rng::derive_seed(base_seed, &[0x5eed, i as u64]);
            let mut stream = rng::stream(seed);
            let (n, k) = sample_baseline(mu_rec, mu_bwd, dist, &mut stream)?;
            entries.push(ScheduleEntry { seed, t: n + k, n, k, tau: 0 });
        }
        Ok(Self::align(entries))
    }

    fn align(mut entries: Vec<ScheduleEntry>) -> Self {
        let t_max = entries.iter().map(|e| e.t).max().unwrap_or(0);
        for e in &mut entries {
            e.tau = t_max - e.t;
        }
        Self { t_max, entries }
    }

    /// JSONL audit dump: one record per sequence.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("schedule entry serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_bwd_rule_matches_ceiling() {
        assert_eq!(mu_bwd_rule(8), 4);
        assert_eq!(mu_bwd_rule(1), 1);
        assert_eq!(mu_bwd_rule(7), 4);
    }

    #[test]
    fn corrected_split_formulas() {
        // The split is a pure function of the drawn T; check both branches.
        let split = |t: u32, mu_bwd: u32| (t.saturating_sub(mu_bwd), t.min(mu_bwd));
        assert_eq!(split(3, 4), (0, 3));
        assert_eq!(split(10, 4), (6, 4));
    }

    #[test]
    fn baseline_keeps_k_pinned_and_floors_t() {
        let mut r = rng::stream(9);
        let dist = DepthDistribution::poisson_lognormal();
        for _ in 0..20_000 {
            let (n, k) = sample_baseline(8, 4, dist, &mut r).unwrap();
            assert_eq!(k, 4);
            assert!(n >= 1, "lognormal kind adds one");
            assert!(n + k >= 5);
        }
    }

    #[test]
    fn baseline_rejects_non_positive_shifted_mean() {
        let mut r = rng::stream(1);
        assert!(sample_baseline(4, 4, DepthDistribution::Poisson, &mut r).is_err());
    }

    #[test]
    fn corrected_emits_depths_at_or_below_mu_bwd() {
        let mut r = rng::stream(5);
        let mut low = 0u32;
        for _ in 0..20_000 {
            let (n, k) = sample_corrected(8, 4, DepthDistribution::Poisson, &mut r);
            assert_eq!(n + k, n + k.min(4));
            if n + k <= 4 {
                low += 1;
            }
        }
        assert!(low > 0, "corrected sampler reaches T <= mu_bwd");
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = DepthSchedule::per_sequence(8, 8, 4, DepthDistribution::Poisson, 1234);
        assert_eq!(s.entries.len(), 8);
        for e in &s.entries {
            assert_eq!(e.n + e.k, e.t);
            assert!(e.k <= 4);
            assert_eq!(e.tau + e.t, s.t_max);
        }
        // Replays exactly.
        let s2 = DepthSchedule::per_sequence(8, 8, 4, DepthDistribution::Poisson, 1234);
        assert_eq!(s, s2);
    }

    #[test]
    fn single_sequence_never_idles() {
        for seed in 0..32 {
            let s = DepthSchedule::per_sequence(1, 6, 3, DepthDistribution::Poisson, seed);
            assert_eq!(s.entries[0].tau, 0);
        }
    }

    #[test]
    fn micro_batch_mode_shares_one_depth() {
        let s = DepthSchedule::per_micro_batch(8, 8, 4, DepthDistribution::Poisson, 7);
        let t0 = s.entries[0].t;
        for e in &s.entries {
            assert_eq!(e.t, t0);
            assert_eq!(e.tau, 0);
        }
    }

    #[test]
    fn poisson_mean_is_close() {
        let mut r = rng::stream(2);
        let n = 100_000;
        let mean = (0..n).map(|_| poisson(8.0, &mut r) as f64).sum::<f64>() / n as f64;
        assert!((mean - 8.0).abs() < 0.05, "mean {mean}");
    }
}
