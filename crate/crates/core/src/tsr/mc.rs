//! Monte Carlo sampling of trajectory success rates.
//!
//! Step rates are `Beta(u, l)` draws built from two Gamma draws. Work is
//! split into fixed-size blocks, each with its own ChaCha8 stream derived
//! from the seed, so results do not depend on how rayon schedules blocks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BetaParams, DomainError};

pub const HISTOGRAM_BINS: usize = 100;
const BLOCK: usize = 4096;

struct BetaSampler {
    a: Gamma<f64>,
    b: Gamma<f64>,
}

impl BetaSampler {
    fn new(p: BetaParams) -> Result<Self, DomainError> {
        p.validate()?;
        let gamma = |shape| Gamma::new(shape, 1.0).map_err(|e| DomainError::Invalid(e.to_string()));
        Ok(Self { a: gamma(p.u)?, b: gamma(p.l)? })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let x = self.a.sample(rng);
        let y = self.b.sample(rng);
        x / (x + y)
    }

    fn trajectory<R: Rng>(&self, k: u64, rng: &mut R) -> f64 {
        (0..k).map(|_| self.sample(rng)).product()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn check(name: &str, v: u64) -> Result<(), DomainError> {
    if v == 0 {
        return Err(DomainError::Invalid(format!("{name} must be at least 1")));
    }
    Ok(())
}

/// `n` independent trajectory success rates, each the product of `k` step
/// rates.
pub fn sample_tsr(b: BetaParams, k: u64, n: usize, seed: u64) -> Result<Vec<f64>, DomainError> {
    check("k", k)?;
    check("n", n as u64)?;
    let sampler = BetaSampler::new(b)?;
    let mut out = vec![0.0; n];
    out.par_chunks_mut(BLOCK).enumerate().for_each(|(block, chunk)| {
        let mut rng = stream(seed, block as u64);
        for v in chunk {
            *v = sampler.trajectory(k, &mut rng);
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub trials: usize,
    pub n_traj: usize,
    pub k: u64,
    /// Mean of the per-trial averages.
    pub mean: f64,
    /// Sample variance of the per-trial averages.
    pub var: f64,
    pub std_error: f64,
    /// 5th, 25th, 50th, 75th and 95th percentiles of the per-trial averages.
    pub quantiles: [f64; 5],
    /// Counts of per-trial averages in 100 equal bins over [0, 1].
    pub histogram: Vec<u64>,
}

/// Runs `trials` independent trials of `n_traj` trajectories and summarises
/// the per-trial average success rate.
pub fn simulate_tsr_mc(
    b: BetaParams,
    k: u64,
    n_traj: usize,
    trials: usize,
    seed: u64,
) -> Result<McSummary, DomainError> {
    check("k", k)?;
    check("n_traj", n_traj as u64)?;
    check("trials", trials as u64)?;
    let sampler = BetaSampler::new(b)?;
    let mut averages: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(seed, trial as u64);
            (0..n_traj).map(|_| sampler.trajectory(k, &mut rng)).sum::<f64>() / n_traj as f64
        })
        .collect();

    let (mean, var) = mean_var(&averages);
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &v in &averages {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    averages.sort_by(f64::total_cmp);
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&averages, q));
    Ok(McSummary { trials, n_traj, k, mean, var, std_error: (var / trials as f64).sqrt(), quantiles, histogram })
}

/// Mean and unbiased sample variance (0 for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// CDF of a log-normal with log-mean `m` and log-variance `s2`.
pub fn lognormal_cdf(x: f64, m: f64, s2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let z = (x.ln() - m) / (2.0 * s2).sqrt();
    0.5 * libm::erfc(-z)
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and
/// `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}
