//! Closed-form importance scores for a univariate Gaussian weight.
//!
//! Every removal criterion is a functional of `θ ~ N(μ, σ²)`: the plain mean
//! magnitude, the classical signal-to-noise ratio, the folded-normal mean
//! `E|θ|`, its SNR, and the mean / SNR of `exp(λ|θ|)`. The exponential pair is
//! evaluated in log space because `E exp(2λ|θ|)` leaves double range as soon
//! as `λσ` reaches ~20.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to a nonpositive variance before taking its square root.
pub const RADICAND_FLOOR: f64 = 1e-30;

static RADICAND_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an SNR denominator was clamped at [`RADICAND_FLOOR`]
/// since process start.
pub fn radicand_clamp_count() -> u64 {
    RADICAND_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate sigma {sigma}: criterion needs sigma > 0")]
    DegenerateSigma { sigma: f64 },
    #[error("lambda must be finite and > 0, got {lambda}")]
    InvalidLambda { lambda: f64 },
    #[error("log-magnitude {log_value} exceeds the representable range")]
    Overflow { log_value: f64 },
    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),
}

/// Mean and standard deviation of one mean-field Gaussian weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussParam {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussParam {
    pub fn new(mu: f64, sigma: f64) -> Self {
        debug_assert!(sigma >= 0.0, "sigma must be nonnegative");
        Self { mu, sigma }
    }

    fn positive_sigma(self) -> Result<Self, StatsError> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(self)
        } else {
            Err(StatsError::DegenerateSigma { sigma: self.sigma })
        }
    }
}

/// Removal criterion. The exponential variants carry their `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionKind {
    AbsMu,
    SnrTheta,
    ExpAbs,
    SnrAbs,
    ExpExpAbs { lambda: f64 },
    SnrExpAbs { lambda: f64 },
}

impl CriterionKind {
    /// Canonical names, in the order the criteria are usually tabulated.
    pub const NAMES: [&'static str; 6] = [
        "abs_mu",
        "snr_theta",
        "e_abs",
        "snr_abs",
        "e_exp_abs",
        "snr_exp_abs",
    ];

    pub fn from_name(name: &str, lambda: f64) -> Result<Self, StatsError> {
        let kind = match name {
            "abs_mu" => Self::AbsMu,
            "snr_theta" => Self::SnrTheta,
            "e_abs" => Self::ExpAbs,
            "snr_abs" => Self::SnrAbs,
            "e_exp_abs" => Self::ExpExpAbs { lambda },
            "snr_exp_abs" => Self::SnrExpAbs { lambda },
            other => return Err(StatsError::UnknownCriterion(other.to_string())),
        };
        kind.validate()?;
        Ok(kind)
    }

    /// All six criteria, sharing one `λ` for the exponential pair.
    pub fn all(lambda: f64) -> [Self; 6] {
        [
            Self::AbsMu,
            Self::SnrTheta,
            Self::ExpAbs,
            Self::SnrAbs,
            Self::ExpExpAbs { lambda },
            Self::SnrExpAbs { lambda },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AbsMu => "abs_mu",
            Self::SnrTheta => "snr_theta",
            Self::ExpAbs => "e_abs",
            Self::SnrAbs => "snr_abs",
            Self::ExpExpAbs { .. } => "e_exp_abs",
            Self::SnrExpAbs { .. } => "snr_exp_abs",
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        match *self {
            Self::ExpExpAbs { lambda } | Self::SnrExpAbs { lambda } => check_lambda(lambda),
            _ => Ok(()),
        }
    }

    /// The criterion value itself.
    pub fn score(&self, p: GaussParam) -> Result<f64, StatsError> {
        match *self {
            Self::AbsMu => Ok(crit_abs_mu(p)),
            Self::SnrTheta => crit_snr_theta(p),
            Self::ExpAbs => crit_e_abs(p),
            Self::SnrAbs => crit_snr_abs(p),
            Self::ExpExpAbs { lambda } => crit_e_exp_abs(p, lambda),
            Self::SnrExpAbs { lambda } => crit_snr_exp_abs(p, lambda),
        }
    }

    /// A strictly increasing transform of [`score`](Self::score) that never
    /// overflows. Used for ranking; the exponential criteria are compared by
    /// their logarithms.
    pub fn rank_key(&self, p: GaussParam) -> Result<f64, StatsError> {
        match *self {
            Self::ExpExpAbs { lambda } => log_e_exp_abs(p, lambda),
            Self::SnrExpAbs { lambda } => log_snr_exp_abs(p, lambda),
            _ => self.score(p),
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExpExpAbs { lambda } | Self::SnrExpAbs { lambda } => {
                write!(f, "{}(lambda={lambda})", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<(), StatsError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(StatsError::InvalidLambda { lambda })
    }
}

/// Standard normal CDF, `Φ(x) = ½ erfc(−x/√2)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, accurate in both tails.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        // Φ(x) = 1 − Φ(−x); the complement is tiny here.
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -37.0 {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        // Mills-ratio asymptotic series; erfc underflows past here.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

pub fn crit_abs_mu(p: GaussParam) -> f64 {
    p.mu.abs()
}

pub fn crit_snr_theta(p: GaussParam) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    Ok(p.mu.abs() / p.sigma)
}

/// Folded-normal mean `E|θ| = μ(2Φ(μ/σ) − 1) + σ√(2/π)·exp(−μ²/(2σ²))`.
pub fn crit_e_abs(p: GaussParam) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    Ok(folded_mean(p.mu, p.sigma))
}

fn folded_mean(mu: f64, sigma: f64) -> f64 {
    let z = mu / sigma;
    // 2Φ(z) − 1 = erf(z/√2), which keeps full precision near z = 0.
    mu * libm::erf(z * FRAC_1_SQRT_2) + sigma * (2.0 / PI).sqrt() * (-0.5 * z * z).exp()
}

/// SNR of `|θ|`: `E|θ| / sqrt(σ² + μ² − (E|θ|)²)`.
pub fn crit_snr_abs(p: GaussParam) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    let mean = folded_mean(p.mu, p.sigma);
    let var = p.sigma * p.sigma + p.mu * p.mu - mean * mean;
    Ok(mean / clamp_radicand(var).sqrt())
}

fn clamp_radicand(v: f64) -> f64 {
    if v > RADICAND_FLOOR {
        v
    } else {
        RADICAND_CLAMPS.fetch_add(1, Ordering::Relaxed);
        RADICAND_FLOOR
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln E exp(c|θ|)` for `c > 0`:
/// `Φ(μ/σ + cσ)·e^{c²σ²/2 + cμ} + Φ(−μ/σ + cσ)·e^{c²σ²/2 − cμ}`, summed in log space.
fn log_exp_abs_moment(mu: f64, sigma: f64, c: f64) -> f64 {
    let z = mu / sigma;
    let half_var = 0.5 * (c * sigma) * (c * sigma);
    let upper = log_std_normal_cdf(z + c * sigma) + half_var + c * mu;
    let lower = log_std_normal_cdf(-z + c * sigma) + half_var - c * mu;
    log_add_exp(upper, lower)
}

/// `ln E exp(λ|θ|)`.
pub fn log_e_exp_abs(p: GaussParam, lambda: f64) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    check_lambda(lambda)?;
    Ok(log_exp_abs_moment(p.mu, p.sigma, lambda))
}

/// `E exp(λ|θ|)`; errors when the value itself is not representable.
pub fn crit_e_exp_abs(p: GaussParam, lambda: f64) -> Result<f64, StatsError> {
    exp_checked(log_e_exp_abs(p, lambda)?)
}

/// `ln SNR(exp(λ|θ|))`. The second moment is the first with `λ → 2λ`.
pub fn log_snr_exp_abs(p: GaussParam, lambda: f64) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    check_lambda(lambda)?;
    let log_m1 = log_exp_abs_moment(p.mu, p.sigma, lambda);
    let log_m2 = log_exp_abs_moment(p.mu, p.sigma, 2.0 * lambda);
    // Var = m2·(1 − m1²/m2); the bracket is the relative radicand.
    let rel = -(2.0 * log_m1 - log_m2).exp_m1();
    let log_var = log_m2 + clamp_radicand(rel).ln();
    Ok(log_m1 - 0.5 * log_var)
}

pub fn crit_snr_exp_abs(p: GaussParam, lambda: f64) -> Result<f64, StatsError> {
    exp_checked(log_snr_exp_abs(p, lambda)?)
}

fn exp_checked(log_value: f64) -> Result<f64, StatsError> {
    let v = log_value.exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(StatsError::Overflow { log_value })
    }
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p²))`.
pub fn kl_gauss_to_prior(p: GaussParam, prior_sigma: f64) -> Result<f64, StatsError> {
    let p = p.positive_sigma()?;
    if prior_sigma.is_nan() || prior_sigma <= 0.0 {
        return Err(StatsError::DegenerateSigma { sigma: prior_sigma });
    }
    let kl = (prior_sigma / p.sigma).ln()
        + (p.sigma * p.sigma + p.mu * p.mu) / (2.0 * prior_sigma * prior_sigma)
        - 0.5;
    Ok(kl.max(0.0))
}

/// Partial derivatives `(∂KL/∂μ, ∂KL/∂σ)` of [`kl_gauss_to_prior`].
pub fn kl_gauss_to_prior_grad(p: GaussParam, prior_sigma: f64) -> (f64, f64) {
    let inv_p2 = 1.0 / (prior_sigma * prior_sigma);
    (p.mu * inv_p2, -1.0 / p.sigma + p.sigma * inv_p2)
}
