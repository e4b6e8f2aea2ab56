//! The sparse subspace: a global binary mask with a fixed budget `s`, and the
//! removal / addition / re-initialization steps that move it.
//!
//! Coordinates are addressed by a flat index running over layers in order and
//! row-major (`[out × in]`) within each layer. All rankings break ties by
//! ascending flat index so that mask updates are reproducible.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian_stats::{CriterionKind, GaussParam, StatsError};
use crate::net::VariationalNet;

/// Value used when a layer has no surviving σ to average.
pub const FALLBACK_SIGMA: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubspaceError {
    #[error("budget {budget} outside [1, {dim}]")]
    BudgetOutOfRange { budget: usize, dim: usize },
    #[error("cannot remove {requested} coordinates from {available} active ones")]
    RemovalTooLarge { requested: usize, available: usize },
    #[error("insufficient candidates: need {needed}, only {available} masked coordinates")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("probe covers {got} coordinates, mask has {expected}")]
    ProbeLength { expected: usize, got: usize },
    #[error("mask shape does not match the network")]
    ShapeMismatch,
    #[error("scoring coordinate {index}: {source}")]
    Score { index: usize, source: StatsError },
}

/// Binary inclusion vector over all weight coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shapes: Vec<(usize, usize)>,
    bits: Vec<bool>,
    budget: usize,
}

impl Mask {
    /// All-ones mask.
    pub fn dense(shapes: &[(usize, usize)]) -> Self {
        let d = shapes.iter().map(|(o, i)| o * i).sum();
        Self {
            shapes: shapes.to_vec(),
            bits: vec![true; d],
            budget: d,
        }
    }

    /// Mask currently installed in `net`; its budget is its active count.
    pub fn from_net(net: &VariationalNet) -> Self {
        let shapes = net.layers.iter().map(|l| l.mask.dim()).collect();
        let bits: Vec<bool> = net
            .layers
            .iter()
            .flat_map(|l| l.mask.iter().copied())
            .collect();
        let budget = bits.iter().filter(|&&b| b).count();
        Self {
            shapes,
            bits,
            budget,
        }
    }

    /// Build from raw per-coordinate bits.
    pub fn from_bits(shapes: &[(usize, usize)], bits: Vec<bool>, budget: usize) -> Self {
        assert_eq!(bits.len(), shapes.iter().map(|(o, i)| o * i).sum::<usize>());
        Self {
            shapes: shapes.to_vec(),
            bits,
            budget,
        }
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Total dimension `d`.
    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Target number of active coordinates `s`.
    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Current `‖γ‖₁`.
    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `1 − active/d`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active() as f64 / self.dim() as f64
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.bits[i]).collect()
    }

    pub fn inactive_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.bits[i]).collect()
    }

    /// Start offset of every layer in the flat index, plus the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = vec![0];
        for (o, i) in &self.shapes {
            acc += o * i;
            out.push(acc);
        }
        out
    }

    /// `(layer, row-major offset within the layer)` of a flat index.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        let offsets = self.offsets();
        let layer = offsets.partition_point(|&o| o <= index) - 1;
        (layer, index - offsets[layer])
    }

    pub fn layer_of(&self, index: usize) -> usize {
        self.locate(index).0
    }

    /// Active coordinates per layer.
    pub fn active_per_layer(&self) -> Vec<usize> {
        let offsets = self.offsets();
        offsets
            .windows(2)
            .map(|w| self.bits[w[0]..w[1]].iter().filter(|&&b| b).count())
            .collect()
    }

    /// Install this mask in `net` and zero parameters outside it.
    pub fn apply_to(&self, net: &mut VariationalNet) -> Result<(), SubspaceError> {
        if net.layers.len() != self.shapes.len()
            || net
                .layers
                .iter()
                .zip(&self.shapes)
                .any(|(l, s)| l.mask.dim() != *s)
        {
            return Err(SubspaceError::ShapeMismatch);
        }
        let offsets = self.offsets();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let bits = &self.bits[offsets[k]..offsets[k + 1]];
            layer.mask.iter_mut().zip(bits).for_each(|(m, &b)| *m = b);
            layer.apply_mask();
        }
        Ok(())
    }

    /// `|self ∩ other| / |self|`, the fraction of active coordinates kept.
    pub fn overlap(&self, other: &Mask) -> f64 {
        let both = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count();
        let n = self.active();
        if n == 0 {
            1.0
        } else {
            both as f64 / n as f64
        }
    }
}

/// Pick `s` of the `d` coordinates uniformly at random, ignoring layer
/// boundaries.
pub fn init_mask<R: Rng + ?Sized>(
    shapes: &[(usize, usize)],
    budget: usize,
    rng: &mut R,
) -> Result<Mask, SubspaceError> {
    let d: usize = shapes.iter().map(|(o, i)| o * i).sum();
    if budget == 0 || budget > d {
        return Err(SubspaceError::BudgetOutOfRange { budget, dim: d });
    }
    let mut bits = vec![false; d];
    if budget == d {
        bits.fill(true);
    } else {
        for i in rand::seq::index::sample(rng, d, budget) {
            bits[i] = true;
        }
    }
    Ok(Mask {
        shapes: shapes.to_vec(),
        bits,
        budget,
    })
}

/// Whether removal/addition rank coordinates across the whole network or
/// within each layer separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    #[default]
    Global,
    PerLayer,
}

/// How many coordinates a removal or addition step moves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Quota {
    Global(usize),
    PerLayer(Vec<usize>),
}

impl Quota {
    /// Split `k` under `ranking`. Per-layer quotas are proportional to each
    /// layer's active count (largest remainder, ties to the lower layer).
    pub fn for_ranking(k: usize, mask: &Mask, ranking: Ranking) -> Self {
        match ranking {
            Ranking::Global => Quota::Global(k),
            Ranking::PerLayer => {
                let active = mask.active_per_layer();
                let total: usize = active.iter().sum();
                if total == 0 {
                    return Quota::PerLayer(vec![0; active.len()]);
                }
                let raw: Vec<f64> = active
                    .iter()
                    .map(|&a| k as f64 * a as f64 / total as f64)
                    .collect();
                let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
                let mut left = k - q.iter().sum::<usize>();
                let mut order: Vec<usize> = (0..raw.len()).collect();
                order.sort_by(|&a, &b| {
                    let ra = raw[a] - raw[a].floor();
                    let rb = raw[b] - raw[b].floor();
                    rb.total_cmp(&ra).then(a.cmp(&b))
                });
                for i in order {
                    if left == 0 {
                        break;
                    }
                    if q[i] < active[i] {
                        q[i] += 1;
                        left -= 1;
                    }
                }
                Quota::PerLayer(q)
            }
        }
    }

    pub fn total(&self) -> usize {
        match self {
            Quota::Global(k) => *k,
            Quota::PerLayer(q) => q.iter().sum(),
        }
    }

    /// The per-layer counts of `indices` as a quota of the same kind.
    fn matching(&self, mask: &Mask, indices: &[usize]) -> Quota {
        match self {
            Quota::Global(_) => Quota::Global(indices.len()),
            Quota::PerLayer(q) => {
                let mut counts = vec![0; q.len()];
                for &i in indices {
                    counts[mask.layer_of(i)] += 1;
                }
                Quota::PerLayer(counts)
            }
        }
    }
}

/// Result of a removal step.
#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub mask: Mask,
    /// Removed flat indices, ascending.
    pub removed: Vec<usize>,
    /// Quota the following addition must refill.
    pub refill: Quota,
}

/// Flat indices of the `quota` lowest-scoring active coordinates under `kind`.
pub fn removal_candidates(
    mask: &Mask,
    net: &VariationalNet,
    quota: &Quota,
    kind: CriterionKind,
) -> Result<Vec<usize>, SubspaceError> {
    let offsets = mask.offsets();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(mask.active());
    for (k, layer) in net.layers.iter().enumerate() {
        for (off, ((&mu, &sigma), &on)) in layer
            .mu
            .iter()
            .zip(layer.sigma.iter())
            .zip(&mask.bits[offsets[k]..offsets[k + 1]])
            .enumerate()
        {
            if on {
                let index = offsets[k] + off;
                let key = kind
                    .rank_key(GaussParam::new(mu, sigma))
                    .map_err(|source| SubspaceError::Score { index, source })?;
                scored.push((key, index));
            }
        }
    }
    let ascending = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut removed = select(scored, quota, mask, ascending, |n| {
        SubspaceError::RemovalTooLarge {
            requested: quota.total(),
            available: n,
        }
    })?;
    removed.sort_unstable();
    Ok(removed)
}

/// Remove the lowest-scoring active coordinates and zero their parameters.
pub fn removal(
    mask: &Mask,
    net: &mut VariationalNet,
    quota: &Quota,
    kind: CriterionKind,
) -> Result<Removal, SubspaceError> {
    if mask.dim() != net.num_weights() {
        return Err(SubspaceError::ShapeMismatch);
    }
    let removed = removal_candidates(mask, net, quota, kind)?;
    let mut next = mask.clone();
    for &i in &removed {
        next.bits[i] = false;
    }
    next.apply_to(net)?;
    let refill = quota.matching(mask, &removed);
    Ok(Removal {
        mask: next,
        removed,
        refill,
    })
}

/// Top-`quota` masked coordinates by `scores` (larger is better).
pub fn addition(
    mask: &Mask,
    scores: &[f64],
    quota: &Quota,
) -> Result<(Mask, Vec<usize>), SubspaceError> {
    if scores.len() != mask.dim() {
        return Err(SubspaceError::ProbeLength {
            expected: mask.dim(),
            got: scores.len(),
        });
    }
    let candidates: Vec<(f64, usize)> = mask
        .inactive_indices()
        .into_iter()
        .map(|i| (scores[i], i))
        .collect();
    let descending = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let mut added = select(candidates, quota, mask, descending, |n| {
        SubspaceError::InsufficientCandidates {
            needed: quota.total(),
            available: n,
        }
    })?;
    added.sort_unstable();
    let mut next = mask.clone();
    for &i in &added {
        next.bits[i] = true;
    }
    Ok((next, added))
}

/// Take the first `quota` entries of `items` under `order`, globally or per
/// layer.
fn select<F, E>(
    mut items: Vec<(f64, usize)>,
    quota: &Quota,
    mask: &Mask,
    order: F,
    short: E,
) -> Result<Vec<usize>, SubspaceError>
where
    F: Fn(&(f64, usize), &(f64, usize)) -> Ordering + Copy,
    E: Fn(usize) -> SubspaceError,
{
    match quota {
        Quota::Global(k) => {
            if *k > items.len() {
                return Err(short(items.len()));
            }
            items.sort_by(order);
            Ok(items.into_iter().take(*k).map(|(_, i)| i).collect())
        }
        Quota::PerLayer(q) => {
            let mut per_layer: Vec<Vec<(f64, usize)>> = vec![Vec::new(); q.len()];
            for it in items {
                per_layer[mask.layer_of(it.1)].push(it);
            }
            let mut out = Vec::new();
            for (mut layer_items, &k) in per_layer.into_iter().zip(q) {
                if k > layer_items.len() {
                    return Err(short(layer_items.len()));
                }
                layer_items.sort_by(order);
                out.extend(layer_items.into_iter().take(k).map(|(_, i)| i));
            }
            Ok(out)
        }
    }
}

/// Monte-Carlo estimator of the addition score `E_q |E_x ∇_θ f|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditionEstimator {
    /// One θ ~ q and one minibatch.
    OneStepSampled,
    /// θ = μ and one minibatch.
    OneStepMean,
    /// Average of `|batch-mean gradient|` over several (θ, minibatch) draws.
    MultiStep { samples: usize },
}

impl AdditionEstimator {
    pub fn samples(&self) -> usize {
        match self {
            Self::MultiStep { samples } => *samples,
            _ => 1,
        }
    }
}

/// How σ is set for coordinates that just entered the subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SigmaReinit {
    Epsilon { value: f64 },
    ModuleMean,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReinitReport {
    /// Layers that had nothing to average and fell back to [`FALLBACK_SIGMA`].
    pub fallback_layers: Vec<usize>,
}

/// Give newly added coordinates `μ = 0` and a positive σ. `net` must already
/// carry the post-addition mask.
pub fn reinit_sigma(
    net: &mut VariationalNet,
    mask: &Mask,
    newly_added: &[usize],
    strategy: SigmaReinit,
) -> ReinitReport {
    let fresh: HashSet<usize> = newly_added.iter().copied().collect();
    let offsets = mask.offsets();
    let mut report = ReinitReport::default();
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let range = offsets[k]..offsets[k + 1];
        let new_here: Vec<usize> = newly_added
            .iter()
            .filter(|i| range.contains(i))
            .map(|i| i - offsets[k])
            .collect();
        if new_here.is_empty() {
            continue;
        }
        let value = match strategy {
            SigmaReinit::Epsilon { value } => value,
            SigmaReinit::ModuleMean => {
                let (sum, n) = layer
                    .sigma
                    .iter()
                    .zip(layer.mask.iter())
                    .enumerate()
                    .filter(|(off, (_, &on))| on && !fresh.contains(&(offsets[k] + off)))
                    .fold((0.0, 0usize), |(s, n), (_, (&sig, _))| (s + sig, n + 1));
                if n == 0 {
                    log::warn!(
                        "layer {k} has no surviving sigma to average; using {FALLBACK_SIGMA}"
                    );
                    report.fallback_layers.push(k);
                    FALLBACK_SIGMA
                } else {
                    sum / n as f64
                }
            }
        };
        let cols = layer.inputs();
        for off in new_here {
            let idx = (off / cols, off % cols);
            layer.mu[idx] = 0.0;
            layer.sigma[idx] = value;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Cosine,
    Constant,
}

/// Replacement rate schedule `r_t` over `total` γ-updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplacementSchedule {
    pub r0: f64,
    pub total: usize,
    pub decay: Decay,
}

pub fn replacement_rate(t: usize, sched: &ReplacementSchedule) -> f64 {
    match sched.decay {
        Decay::Constant => sched.r0,
        Decay::Cosine => {
            if sched.total == 0 {
                return sched.r0;
            }
            let frac = t.min(sched.total) as f64 / sched.total as f64;
            (0.5 * sched.r0 * (1.0 + (PI * frac).cos())).clamp(0.0, sched.r0)
        }
    }
}

/// `K_t = round(r_t · s)`; zero for a dense subspace.
pub fn replacement_count(rate: f64, budget: usize, dim: usize) -> usize {
    if budget >= dim {
        return 0;
    }
    ((rate * budget as f64).round().max(0.0) as usize).min(budget)
}
