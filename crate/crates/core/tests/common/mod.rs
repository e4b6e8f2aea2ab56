//! Test oracles shared by the integration targets.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

/// Estimate on the log scale with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct LogEstimate {
    pub log_value: f64,
    pub se: f64,
}

impl LogEstimate {
    /// `|log x − estimate|` in standard errors.
    pub fn z(&self, log_closed_form: f64) -> f64 {
        (log_closed_form - self.log_value).abs() / self.se
    }
}

/// Importance-sampling estimates of the four nontrivial criteria of
/// `θ ~ N(μ, σ²)`, all from one sample set.
#[derive(Debug, Clone, Copy)]
pub struct CriteriaOracle {
    pub e_abs: LogEstimate,
    pub snr_abs: LogEstimate,
    pub e_exp_abs: LogEstimate,
    pub snr_exp_abs: LogEstimate,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln |eˣ − 1|`.
fn ln_abs_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().abs().ln()
    }
}

/// Log of the sample mean of `exp(log_terms)` and the standard error of
/// that log, plus the scaled terms `exp(log_terms − log mean)`.
fn log_mean(log_terms: &[f64]) -> (f64, Vec<f64>) {
    let n = log_terms.len() as f64;
    let lm = log_sum_exp(log_terms) - n.ln();
    let scaled = log_terms.iter().map(|t| (t - lm).exp()).collect();
    (lm, scaled)
}

fn se_of_mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// The proposal is an equal mixture of the tilted normals
/// `N(μ + tσ², σ²)` for `t ∈ {0, ±λ, ±2λ}`. Tilting by `±λ` makes
/// `e^{λ|θ|}·p(θ)/q(θ)` bounded, and `±2λ` does the same for `e^{2λ|θ|}`,
/// so every estimator below has finite variance. Everything is kept on the
/// log scale because `e^{λ|θ|}` overflows for `λσ` in the tens.
///
/// Ratios use the delta method: `log SNR = log m₁ − ½ log v` with per-sample
/// influence `a_i − ½ b_i`, where `a` and `b` are the weighted terms scaled
/// by their means.
pub fn criteria_oracle<R: Rng>(
    mu: f64,
    sigma: f64,
    lambda: f64,
    n: usize,
    rng: &mut R,
) -> CriteriaOracle {
    let tilts = [0.0, lambda, -lambda, 2.0 * lambda, -2.0 * lambda];
    let mut theta = Vec::with_capacity(n);
    let mut log_w = Vec::with_capacity(n);
    let mut comps = [0.0; 5];
    for _ in 0..n {
        let t = tilts[rng.random_range(0..tilts.len())];
        let z: f64 = rng.sample(StandardNormal);
        let th = mu + t * sigma * sigma + sigma * z;
        let dev = th - mu;
        for (c, &tk) in comps.iter_mut().zip(&tilts) {
            *c = tk * dev - 0.5 * tk * tk * sigma * sigma;
        }
        // p/q = 1 / mean_k exp(t_k(θ−μ) − t_k²σ²/2)
        log_w.push(-(log_sum_exp(&comps) - (tilts.len() as f64).ln()));
        theta.push(th);
    }

    // E|θ| and SNR(|θ|)
    let log_abs: Vec<f64> = theta
        .iter()
        .zip(&log_w)
        .map(|(t, w)| w + t.abs().ln())
        .collect();
    let (lm_abs, a_abs) = log_mean(&log_abs);
    let m_abs = lm_abs.exp();
    let log_dev: Vec<f64> = theta
        .iter()
        .zip(&log_w)
        .map(|(t, w)| w + 2.0 * (t.abs() - m_abs).abs().ln())
        .collect();
    let (lv_abs, b_abs) = log_mean(&log_dev);

    // E e^{λ|θ|} and SNR(e^{λ|θ|})
    let log_f: Vec<f64> = theta.iter().map(|t| lambda * t.abs()).collect();
    let log_exp: Vec<f64> = log_f.iter().zip(&log_w).map(|(f, w)| w + f).collect();
    let (lm_exp, a_exp) = log_mean(&log_exp);
    let log_dev_exp: Vec<f64> = log_f
        .iter()
        .zip(&log_w)
        .map(|(f, w)| w + 2.0 * ln_abs_expm1(f - lm_exp))
        .collect();
    let (lv_exp, b_exp) = log_mean(&log_dev_exp);

    let influence =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a - 0.5 * b).collect() };
    CriteriaOracle {
        e_abs: LogEstimate {
            log_value: lm_abs,
            se: se_of_mean(&a_abs),
        },
        snr_abs: LogEstimate {
            log_value: lm_abs - 0.5 * lv_abs,
            se: se_of_mean(&influence(&a_abs, &b_abs)),
        },
        e_exp_abs: LogEstimate {
            log_value: lm_exp,
            se: se_of_mean(&a_exp),
        },
        snr_exp_abs: LogEstimate {
            // the deviations were taken relative to m₁, so v is already v/m₁²
            log_value: -0.5 * lv_exp,
            se: se_of_mean(&influence(&a_exp, &b_exp)),
        },
    }
}

/// Sample mean, variance and the standard errors of both.
#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Moments {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        se_var: ((m4 - var * var).max(0.0) / n).sqrt(),
    }
}

/// Two-sample z-scores of the mean and of the variance.
pub fn moment_z(a: &Moments, b: &Moments) -> (f64, f64) {
    let zm = (a.mean - b.mean).abs() / (a.se_mean.powi(2) + b.se_mean.powi(2)).sqrt();
    let zv = (a.var - b.var).abs() / (a.se_var.powi(2) + b.se_var.powi(2)).sqrt();
    (zm, zv)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical value of the two-sample KS test at level `alpha`.
pub fn ks_critical(na: usize, nb: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((na + nb) as f64 / (na * nb) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Training accuracy of a logistic-regression probe fitted by full-batch
/// gradient descent on `[n × 2]` features with binary labels.
pub fn logistic_probe_accuracy(features: &ndarray::Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    for _ in 0..3000 {
        let mut gw = [0.0; 2];
        let mut gb = 0.0;
        for (row, &y) in features.rows().into_iter().zip(labels) {
            let z = w[0] * row[0] + w[1] * row[1] + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            gw[0] += err * row[0];
            gw[1] += err * row[1];
            gb += err;
        }
        w[0] -= 0.5 * gw[0] / n;
        w[1] -= 0.5 * gw[1] / n;
        b -= 0.5 * gb / n;
    }
    let hits = features
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| ((w[0] * row[0] + w[1] * row[1] + b > 0.0) as usize) == y)
        .count();
    hits as f64 / n
}
