//! Evaluation statistics: accuracy / NLL, expected calibration error,
//! removal-set agreement, and a training-FLOPs model.

use std::collections::HashSet;
use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::{ElboBreakdown, TrainConfig};

/// Probability floor inside the log of the NLL.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceRange(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EceConfig {
    pub n_bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        Self { n_bins: 15 }
    }
}

/// Expected calibration error with equal-width confidence bins:
/// `Σ_b (n_b/N)·|acc_b − conf_b|` over nonempty bins.
pub fn ece(confidences: &[f64], correct: &[bool], cfg: EceConfig) -> Result<f64, MetricsError> {
    if confidences.is_empty() {
        return Err(MetricsError::Empty);
    }
    if confidences.len() != correct.len() {
        return Err(MetricsError::LengthMismatch(
            confidences.len(),
            correct.len(),
        ));
    }
    let bins = cfg.n_bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(MetricsError::ConfidenceRange(c));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// `|A∩B| / |A∪B|`, with two empty sets counting as full agreement.
pub fn criterion_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Top-1 accuracy and mean NLL of the true class for `[n × C]` probabilities.
pub fn accuracy_nll(
    probs: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, f64), MetricsError> {
    if probs.nrows() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let classes = probs.ncols();
    let mut hits = 0usize;
    let mut nll = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= classes {
            return Err(MetricsError::LabelRange { label: y, classes });
        }
        if argmax(row.iter().copied()) == y {
            hits += 1;
        }
        nll -= row[y].max(NLL_FLOOR).ln();
    }
    let n = labels.len() as f64;
    Ok((hits as f64 / n, nll / n))
}

/// Confidence (max probability) and correctness per row.
pub fn confidences(probs: ArrayView2<'_, f64>, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let k = argmax(row.iter().copied());
            (row[k].clamp(0.0, 1.0), k == y)
        })
        .unzip()
}

/// First index of the maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Multiply-add counts of one network; FLOPs are counted as two per
/// multiply-add.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsModel {
    /// Dense multiply-adds per example, per layer.
    pub dense_per_layer: Vec<usize>,
    /// Active weight count `s`.
    pub active: usize,
}

/// Mean and variance paths of the LRT forward.
pub const LRT_FORWARD_PASSES: f64 = 2.0;
/// Backward cost relative to forward.
pub const BACKWARD_FACTOR: f64 = 2.0;

impl FlopsModel {
    pub fn new(dims: &[usize], active: usize) -> Self {
        let dense_per_layer: Vec<usize> = dims.windows(2).map(|w| w[0] * w[1]).collect();
        Self {
            dense_per_layer,
            active,
        }
    }

    pub fn dense(&self) -> usize {
        self.dense_per_layer.iter().sum()
    }

    /// FLOPs of one training step over `batch` examples.
    pub fn step(&self, batch: usize) -> f64 {
        2.0 * LRT_FORWARD_PASSES * (1.0 + BACKWARD_FACTOR) * self.active as f64 * batch as f64
    }

    /// FLOPs of one dense gradient probe (single point-weight pass) per MC
    /// sample.
    pub fn probe(&self, batch: usize, samples: usize) -> f64 {
        2.0 * (1.0 + BACKWARD_FACTOR) * self.dense() as f64 * batch as f64 * samples as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub sparse: f64,
    pub dense: f64,
    pub ratio: f64,
}

/// Training FLOPs of a full run under `cfg`, and of the same run at
/// sparsity 0.
pub fn flops_estimate(dims: &[usize], cfg: &TrainConfig) -> FlopsEstimate {
    let d: usize = dims.windows(2).map(|w| w[0] * w[1]).sum();
    let s = cfg.budget(d);
    let sparse = run_flops(&FlopsModel::new(dims, s), cfg, s < d);
    let dense = run_flops(&FlopsModel::new(dims, d), cfg, false);
    FlopsEstimate {
        sparse,
        dense,
        ratio: sparse / dense,
    }
}

fn run_flops(model: &FlopsModel, cfg: &TrainConfig, with_gamma_updates: bool) -> f64 {
    let steps = (cfg.optim.outer_steps * cfg.optim.inner_steps) as f64;
    let mut total = steps * model.step(cfg.optim.batch_size);
    if with_gamma_updates {
        total += cfg.optim.outer_steps as f64
            * model.probe(cfg.optim.batch_size, cfg.subspace.addition().samples());
    }
    total
}

/// Pairwise IoU of the removal sets chosen by several criteria on the same φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSnapshot {
    pub criteria: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl IouSnapshot {
    pub fn from_sets(criteria: Vec<String>, sets: &[Vec<usize>]) -> Self {
        let matrix = sets
            .iter()
            .map(|a| sets.iter().map(|b| criterion_iou(a, b)).collect())
            .collect();
        Self { criteria, matrix }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.criteria.iter().position(|c| c == a)?;
        let j = self.criteria.iter().position(|c| c == b)?;
        Some(self.matrix[i][j])
    }
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub gamma_update: usize,
    pub beta: f64,
    pub lr: f64,
    pub r_t: f64,
    /// Evaluation NLL (Gaussian NLL for regression).
    pub nll: f64,
    /// Unscaled KL over active coordinates.
    pub kl: f64,
    pub acc: Option<f64>,
    pub ece: Option<f64>,
    pub rmse: Option<f64>,
    pub sparsity: f64,
    pub active: usize,
    /// Cumulative training FLOPs so far.
    pub flops_est: f64,
    /// Objective of the last φ-step.
    pub train: ElboBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<IouSnapshot>,
}

/// One row per record, flat columns for plotting.
pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "gamma_update",
        "beta",
        "lr",
        "r_t",
        "nll",
        "kl",
        "acc",
        "ece",
        "rmse",
        "sparsity",
        "active",
        "flops_est",
        "train_total",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.gamma_update.to_string(),
            r.beta.to_string(),
            r.lr.to_string(),
            r.r_t.to_string(),
            r.nll.to_string(),
            r.kl.to_string(),
            opt(r.acc),
            opt(r.ece),
            opt(r.rmse),
            r.sparsity.to_string(),
            r.active.to_string(),
            r.flops_est.to_string(),
            r.train.total.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ece_extremes() {
        let cfg = EceConfig::default();
        assert_eq!(ece(&[1.0; 10], &[true; 10], cfg).unwrap(), 0.0);
        assert_eq!(ece(&[1.0; 10], &[false; 10], cfg).unwrap(), 1.0);
        assert!(matches!(ece(&[], &[], cfg), Err(MetricsError::Empty)));
        assert!(ece(&[0.5], &[true, false], cfg).is_err());
        assert!(ece(&[1.5], &[true], cfg).is_err());
    }

    #[test]
    fn ece_of_calibrated_stream_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let (conf, correct): (Vec<f64>, Vec<bool>) = (0..n)
            .map(|_| {
                let c: f64 = rng.random();
                (c, rng.random::<f64>() < c)
            })
            .unzip();
        let e = ece(&conf, &correct, EceConfig::default()).unwrap();
        assert!(e < 0.01, "{e}");
    }

    #[test]
    fn ece_single_bin_is_linear_in_merges() {
        let cfg = EceConfig { n_bins: 1 };
        let (c1, k1) = (vec![0.9, 0.8, 0.7], vec![true, true, true]);
        let (c2, k2) = (vec![0.6, 0.95], vec![true, true]);
        let e1 = ece(&c1, &k1, cfg).unwrap();
        let e2 = ece(&c2, &k2, cfg).unwrap();
        let merged_c: Vec<f64> = c1.iter().chain(&c2).copied().collect();
        let merged_k: Vec<bool> = k1.iter().chain(&k2).copied().collect();
        let e = ece(&merged_c, &merged_k, cfg).unwrap();
        // every example is under-confident, so the single-bin gap is additive
        assert!((e - (3.0 * e1 + 2.0 * e2) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(criterion_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(criterion_iou(&[1, 2], &[3]), 0.0);
        assert_eq!(criterion_iou(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(criterion_iou(&[], &[]), 1.0);
    }

    #[test]
    fn accuracy_and_nll() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        let (acc, nll) = accuracy_nll(probs.view(), &[0, 1]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(nll.abs() < 1e-15);
        let uniform = Array2::from_elem((4, 10), 0.1);
        let (_, nll) = accuracy_nll(uniform.view(), &[0, 3, 5, 9]).unwrap();
        assert!((nll - 10f64.ln()).abs() < 1e-12);
        // hand computation: correct, wrong, correct
        let probs = array![[0.7, 0.2, 0.1], [0.5, 0.3, 0.2], [0.1, 0.1, 0.8]];
        let (acc, nll) = accuracy_nll(probs.view(), &[0, 1, 2]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        let want = -(0.7f64.ln() + 0.3f64.ln() + 0.8f64.ln()) / 3.0;
        assert!((nll - want).abs() < 1e-12);
        assert!(accuracy_nll(probs.view(), &[0, 1]).is_err());
        assert!(accuracy_nll(probs.view(), &[0, 1, 3]).is_err());
    }

    #[test]
    fn flops_ratios() {
        let dims = [2, 32, 32, 2];
        let mut cfg = TrainConfig::default();
        cfg.subspace.sparsity = 0.0;
        assert_eq!(flops_estimate(&dims, &cfg).ratio, 1.0);
        cfg.subspace.sparsity = 0.9;
        let a = flops_estimate(&dims, &cfg);
        assert!((a.ratio - 0.10).abs() <= 0.01, "{}", a.ratio);
        cfg.optim.outer_steps *= 2;
        let b = flops_estimate(&dims, &cfg);
        assert_eq!(b.sparse, 2.0 * a.sparse);
        assert_eq!(b.dense, 2.0 * a.dense);
    }

    proptest! {
        #[test]
        fn ece_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let conf: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let ok: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let pc: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
            let po: Vec<bool> = idx.iter().map(|&i| ok[i]).collect();
            let a = ece(&conf, &ok, EceConfig::default()).unwrap();
            let b = ece(&pc, &po, EceConfig::default()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn iou_symmetric(a in proptest::collection::vec(0usize..30, 0..20), b in proptest::collection::vec(0usize..30, 0..20)) {
            let x = criterion_iou(&a, &b);
            prop_assert_eq!(x, criterion_iou(&b, &a));
            let sa: HashSet<_> = a.iter().collect();
            let sb: HashSet<_> = b.iter().collect();
            prop_assert_eq!(x == 1.0, sa == sb);
        }

        #[test]
        fn flops_monotone_in_sparsity(p in 0.0f64..0.99, q in 0.0f64..0.99) {
            let dims = [2, 32, 32, 2];
            let mut cfg = TrainConfig::default();
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            cfg.subspace.sparsity = lo;
            let a = flops_estimate(&dims, &cfg).sparse;
            cfg.subspace.sparsity = hi;
            let b = flops_estimate(&dims, &cfg).sparse;
            // the probe cost only appears once sparsity > 0
            if lo > 0.0 {
                prop_assert!(b <= a);
            }
        }
    }
}
