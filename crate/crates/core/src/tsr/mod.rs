//! Statistical model of task success.
//!
//! Each step succeeds with a rate drawn from `Beta(u, l)`. A trajectory of
//! `k` steps succeeds with the product of its step rates, whose logarithm is
//! a sum of `k` independent `ln Beta` terms with mean `psi(u) - psi(u+l)` and
//! variance `psi'(u) - psi'(u+l)`. Treating that sum as normal makes the
//! trajectory rate log-normal, and the average over `N` trajectories
//! approximately normal.

pub mod mc;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mc::{ks_distance, lognormal_cdf, sample_tsr, simulate_tsr_mc, McSummary, HISTOGRAM_BINS};
pub use special::{digamma, trigamma};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub u: f64,
    pub l: f64,
}

impl BetaParams {
    pub fn new(u: f64, l: f64) -> Result<Self, DomainError> {
        let b = Self { u, l };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        for (name, value) in [("u", self.u), ("l", self.l)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(DomainError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Mean step success rate, `u / (u + l)`.
    pub fn mean(&self) -> f64 {
        self.u / (self.u + self.l)
    }
}

/// Mean and variance of `ln X` for `X ~ Beta(u, l)`.
///
/// For integer `l` the differences telescope into finite sums, which are
/// used directly.
pub fn beta_log_moments(b: BetaParams) -> Result<(f64, f64), DomainError> {
    b.validate()?;
    if b.l.fract() == 0.0 && b.l <= 1e6 {
        let (mut mu, mut sigma2) = (0.0, 0.0);
        for j in 0..b.l as u64 {
            let v = b.u + j as f64;
            mu -= 1.0 / v;
            sigma2 += 1.0 / (v * v);
        }
        return Ok((mu, sigma2));
    }
    let mu = digamma(b.u)? - digamma(b.u + b.l)?;
    let sigma2 = trigamma(b.u)? - trigamma(b.u + b.l)?;
    Ok((mu, sigma2))
}

/// Log-normal description of one `k`-step trajectory's success rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalTsr {
    pub log_mean: f64,
    pub log_var: f64,
    pub mean: f64,
    pub var: f64,
}

fn check_count(name: &'static str, v: u64) -> Result<(), DomainError> {
    if v == 0 {
        Err(DomainError::Invalid(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

pub fn lognormal_tsr(b: BetaParams, k: u64) -> Result<LogNormalTsr, DomainError> {
    check_count("k", k)?;
    let (mu, sigma2) = beta_log_moments(b)?;
    let k = k as f64;
    let (m, s2) = (k * mu, k * sigma2);
    Ok(LogNormalTsr { log_mean: m, log_var: s2, mean: (m + s2 / 2.0).exp(), var: (2.0 * m + s2).exp() * s2.exp_m1() })
}

/// Normal approximation of the average over `n` trajectories:
/// `(mean, variance)`.
pub fn tsr_avg_normal(b: BetaParams, k: u64, n: u64) -> Result<(f64, f64), DomainError> {
    check_count("n", n)?;
    let ln = lognormal_tsr(b, k)?;
    Ok((ln.mean, ln.var / n as f64))
}

/// Trajectory shape used for the complex-step bounds: `delta` of the `k`
/// steps are complex. `m` is the single-step rate, `q` and `p` the lower
/// and upper step rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsrScenario {
    pub k: u32,
    pub n_traj: u64,
    pub delta: u32,
    pub m: f64,
    pub q: f64,
    pub p: f64,
}

impl TsrScenario {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.k == 0 || self.n_traj == 0 {
            return Err(DomainError::Invalid("k and n_traj must be at least 1".into()));
        }
        if self.delta > self.k {
            return Err(DomainError::Invalid(format!("delta {} exceeds k {}", self.delta, self.k)));
        }
        for (name, v) in [("m", self.m), ("q", self.q), ("p", self.p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DomainError::Invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Which exponent assignment to use for the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsReading {
    /// `m^delta * q^(k-delta)` and `m^delta * p^(k-delta)`.
    #[default]
    Literal,
    /// `q^delta * m^(k-delta)` and `p^delta * m^(k-delta)`.
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsrBounds {
    pub lower: f64,
    pub upper: f64,
}

pub fn tsr_bounds(s: &TsrScenario, reading: BoundsReading) -> Result<TsrBounds, DomainError> {
    s.validate()?;
    let (d, rest) = (s.delta as i32, (s.k - s.delta) as i32);
    Ok(match reading {
        BoundsReading::Literal => {
            TsrBounds { lower: s.m.powi(d) * s.q.powi(rest), upper: s.m.powi(d) * s.p.powi(rest) }
        }
        BoundsReading::Alternate => {
            TsrBounds { lower: s.q.powi(d) * s.m.powi(rest), upper: s.p.powi(d) * s.m.powi(rest) }
        }
    })
}
