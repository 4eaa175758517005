//! True-environment evaluation and robust-percentile summaries.
//!
//! Policies are judged by the 10th percentile of evaluation returns pooled
//! over the final 10% of training iterations across seeds, not by their
//! mean: without environment access there is no reliable way to pick a good
//! iteration, so the worst plausible outcome is what matters. The percentile
//! uncertainty is reported as 1.7x the standard error of the pooled mean;
//! the Monte Carlo checks in this module validate that constant (the pooled
//! values are treated as Gaussian even though strictly they are not
//! independent across iterations).

use crate::behavior::BehaviorPolicy;
use crate::env::EnvSpec;
use crate::policy::DeterministicPolicy;
use crate::seeding::{self, Stream};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Ratio between the 10th percentile's uncertainty and the mean's, for
/// normally distributed pools. Validated by [`mc_percentile_factor`];
/// the asymptotic value is sqrt(q(1-q)) / pdf(z_q) ~ 1.709 at q = 0.1.
pub const PERCENTILE_UNCERTAINTY_FACTOR: f64 = 1.7;

/// Anything that maps states to in-box actions deterministically.
pub trait ActionPolicy {
    fn act_on(&self, s: &[f64]) -> Vec<f64>;
}

impl ActionPolicy for DeterministicPolicy {
    fn act_on(&self, s: &[f64]) -> Vec<f64> {
        self.act(s)
    }
}

impl ActionPolicy for BehaviorPolicy {
    fn act_on(&self, s: &[f64]) -> Vec<f64> {
        self.action(s)
    }
}

/// Mean undiscounted return over `n_traj` seeded episodes of `traj_len`
/// steps each, from the environment's reset distribution.
pub fn evaluate_policy(
    env: &EnvSpec,
    policy: &dyn ActionPolicy,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
) -> Result<f64> {
    if n_traj == 0 {
        return Err(Error::Contract("evaluation needs at least one trajectory".into()));
    }
    let mut total = 0.0;
    for i in 0..n_traj {
        let mut rng = seeding::stream(seed, "eval-traj", i as u64);
        let mut s = env.reset(&mut rng);
        let mut ret = 0.0;
        for _ in 0..traj_len {
            let a = policy.act_on(&s);
            let (next, r) = env.step(&s, &a, &mut rng)?;
            ret += r;
            s = next;
        }
        total += ret;
    }
    Ok(total / n_traj as f64)
}

/// Per-seed, per-iteration true-environment mean returns.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfMatrix {
    /// `rows[seed][iteration]`.
    pub rows: Vec<Vec<f64>>,
}

impl PerfMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Contract("empty performance matrix".into()));
        }
        let width = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Contract(format!(
                    "performance matrix is ragged: row {i} has {} of {width} entries",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("non-finite entry in row {i}")));
            }
        }
        Ok(PerfMatrix { rows })
    }

    pub fn n_seeds(&self) -> usize {
        self.rows.len()
    }

    pub fn n_iterations(&self) -> usize {
        self.rows[0].len()
    }
}

/// A robust-percentile summary of pooled tail performance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustSummary {
    pub percentile: f64,
    /// 1.7x the standard error of the pooled mean.
    pub std_err: f64,
    pub n_pooled: usize,
}

/// Nearest-rank percentile index: 1-based rank ceil(q n), clamped to >= 1.
fn nearest_rank_index(q: f64, n: usize) -> usize {
    let rank = (q * n as f64).ceil() as usize;
    rank.max(1) - 1
}

/// Pool the final `tail_fraction` of iterations across all seeds and take
/// the nearest-rank `q` percentile with its uncertainty.
pub fn robust_percentile(perf: &PerfMatrix, tail_fraction: f64, q: f64) -> Result<RobustSummary> {
    if perf.n_iterations() < 10 {
        return Err(Error::Contract(format!(
            "robust percentile needs at least 10 iterations, got {}",
            perf.n_iterations()
        )));
    }
    if !(0.0 < q && q < 1.0) || !(0.0 < tail_fraction && tail_fraction <= 1.0) {
        return Err(Error::Contract(
            "tail fraction must be in (0, 1] and q in (0, 1)".into(),
        ));
    }
    let iters = perf.n_iterations();
    let tail = ((tail_fraction * iters as f64).ceil() as usize).clamp(1, iters);
    let mut pool = Vec::with_capacity(perf.n_seeds() * tail);
    for row in &perf.rows {
        pool.extend_from_slice(&row[iters - tail..]);
    }
    if pool.is_empty() {
        return Err(Error::Contract("empty pool".into()));
    }
    pool.sort_unstable_by(f64::total_cmp);
    let percentile = pool[nearest_rank_index(q, pool.len())];
    let std_err = PERCENTILE_UNCERTAINTY_FACTOR * sample_std(&pool) / (pool.len() as f64).sqrt();
    Ok(RobustSummary {
        percentile,
        std_err,
        n_pooled: pool.len(),
    })
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Monte Carlo estimate of how much more uncertain the nearest-rank
/// q-quantile of n standard normals is than their mean: draws `reps`
/// samples and returns std(per-sample quantile) / std(per-sample mean).
pub fn mc_quantile_factor(n: usize, reps: usize, q: f64, rng: &mut Stream) -> Result<f64> {
    if n < 100 || reps < 10_000 {
        return Err(Error::Contract(
            "quantile factor estimation needs n >= 100 and reps >= 10000".into(),
        ));
    }
    let idx = nearest_rank_index(q, n);
    let mut quantiles = Vec::with_capacity(reps);
    let mut means = Vec::with_capacity(reps);
    let mut sample = vec![0.0f64; n];
    for _ in 0..reps {
        let mut sum = 0.0;
        for x in sample.iter_mut() {
            *x = rng.sample(StandardNormal);
            sum += *x;
        }
        means.push(sum / n as f64);
        let (_, pivot, _) = sample.select_nth_unstable_by(idx, f64::total_cmp);
        quantiles.push(*pivot);
    }
    Ok(sample_std(&quantiles) / sample_std(&means))
}

/// The 10th-percentile case of [`mc_quantile_factor`].
pub fn mc_percentile_factor(n: usize, reps: usize, rng: &mut Stream) -> Result<f64> {
    mc_quantile_factor(n, reps, 0.1, rng)
}

/// Mean of X^2 over `reps` draws of X ~ N(0, s^2); converges to s^2.
pub fn mc_gaussian_square(reps: usize, s: f64, rng: &mut Stream) -> Result<f64> {
    if reps < 100_000 {
        return Err(Error::Contract(
            "squared-Gaussian estimation needs reps >= 100000".into(),
        ));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for _ in 0..reps {
        let x: f64 = rng.sample(StandardNormal);
        let scaled = s * x;
        acc += scaled * scaled;
    }
    Ok(acc / reps as f64)
}

/// Closed-form asymptotic ratio sqrt(q(1-q)) / pdf(z_q) between quantile and
/// mean uncertainty for normal samples; reference for the Monte Carlo checks.
pub fn quantile_factor_asymptotic(q: f64) -> f64 {
    let z = normal_quantile(q);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (q * (1.0 - q)).sqrt() / pdf
}

/// Beasley-Springer-Moro style rational approximation of the standard
/// normal quantile, good to ~1e-9 over (0, 1).
fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    // Acklam's coefficients.
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}
