//! Alternating optimization: `M` SGD steps on the variational parameters of
//! the active subspace, then one removal/addition update of the mask, for
//! `T` rounds. Evaluation runs after every mask update.

use std::f64::consts::PI;

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{Targets, TrainTest};
use crate::gaussian_stats::{CriterionKind, StatsError};
use crate::layers::LayerError;
use crate::metrics::{self, EceConfig, FlopsModel, IouSnapshot, MetricsRecord};
use crate::net::{softmax_columns, Batch, BatchTargets, Head, NetGrads, ProbeMode, VariationalNet};
use crate::subspace::{
    self, AdditionEstimator, Decay, Mask, Quota, Ranking, ReplacementSchedule, SigmaReinit,
    SubspaceError,
};

/// Default lower bound for σ of active coordinates after an SGD step.
///
/// The KL gradient in σ is `−β/(nσ)`, so a σ that lands on a tiny floor
/// gets kicked back by `lr·β/(n·floor)` on the next step. At `1e-8` that
/// kick reaches order 10 and can blow up training; `1e-4` bounds it.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Independent RNG streams derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const MASK: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    /// Mean `m` of the initial σ distribution `N(m, (m/10)²)`.
    pub sigma_init: f64,
    /// Observation noise of the regression likelihood.
    pub noise_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            sigma_init: 0.001,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Number of mask updates `T`.
    pub outer_steps: usize,
    /// SGD steps between mask updates `M`.
    pub inner_steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub beta_max: f64,
    pub warmup_fraction: f64,
    pub prior_sigma: f64,
    /// Projection bound for σ of active coordinates.
    pub sigma_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            outer_steps: 100,
            inner_steps: 100,
            batch_size: 64,
            lr0: 0.1,
            lr_schedule: LrSchedule::Cosine,
            beta_max: 1.0,
            warmup_fraction: 0.3,
            prior_sigma: 1.0,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditionKind {
    #[default]
    OneStepSampled,
    OneStepMean,
    MultiStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitKind {
    #[default]
    ModuleMean,
    Epsilon,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceConfig {
    /// Fraction of weights held at zero; `s = round((1 − sparsity)·d)`.
    pub sparsity: f64,
    /// Removal criterion name, one of [`CriterionKind::NAMES`].
    pub criterion: String,
    /// λ of the exponential criteria.
    pub lambda: f64,
    pub addition: AdditionKind,
    /// Draws averaged by the multi-step addition estimator.
    pub mc_samples: usize,
    /// Initial replacement rate `r_0`.
    pub r0: f64,
    pub decay: Decay,
    pub ranking: Ranking,
    pub reinit: ReinitKind,
    /// σ given to re-added weights under the epsilon strategy.
    pub reinit_epsilon: f64,
    /// Record removal-set IoU across all criteria at every mask update.
    pub track_iou: bool,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            criterion: "snr_abs".into(),
            lambda: 1.0,
            addition: AdditionKind::OneStepSampled,
            mc_samples: 4,
            r0: 0.3,
            decay: Decay::Cosine,
            ranking: Ranking::Global,
            reinit: ReinitKind::ModuleMean,
            reinit_epsilon: 1e-4,
            track_iou: false,
        }
    }
}

impl SubspaceConfig {
    pub fn criterion(&self) -> Result<CriterionKind, StatsError> {
        let kind = CriterionKind::from_name(&self.criterion, self.lambda)?;
        kind.validate()?;
        Ok(kind)
    }

    pub fn addition(&self) -> AdditionEstimator {
        match self.addition {
            AdditionKind::OneStepSampled => AdditionEstimator::OneStepSampled,
            AdditionKind::OneStepMean => AdditionEstimator::OneStepMean,
            AdditionKind::MultiStep => AdditionEstimator::MultiStep {
                samples: self.mc_samples,
            },
        }
    }

    pub fn reinit(&self) -> SigmaReinit {
        match self.reinit {
            ReinitKind::ModuleMean => SigmaReinit::ModuleMean,
            ReinitKind::Epsilon => SigmaReinit::Epsilon {
                value: self.reinit_epsilon,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior draws averaged per prediction.
    pub samples: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            ece_bins: 15,
        }
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub subspace: SubspaceConfig,
    pub eval: EvalConfig,
}

/// A config value that fails validation, named by its dotted path.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct InvalidField {
    pub field: String,
    pub reason: String,
}

fn invalid(field: &str, reason: impl Into<String>) -> InvalidField {
    InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), InvalidField> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            field,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

fn nonzero(field: &str, v: usize) -> Result<(), InvalidField> {
    if v > 0 {
        Ok(())
    } else {
        Err(invalid(field, "must be at least 1"))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), InvalidField> {
        if self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", "widths must be at least 1"));
        }
        positive("model.sigma_init", self.model.sigma_init)?;
        positive("model.noise_sigma", self.model.noise_sigma)?;
        nonzero("optim.outer_steps", self.optim.outer_steps)?;
        nonzero("optim.inner_steps", self.optim.inner_steps)?;
        nonzero("optim.batch_size", self.optim.batch_size)?;
        positive("optim.lr0", self.optim.lr0)?;
        if !(self.optim.beta_max >= 0.0 && self.optim.beta_max.is_finite()) {
            return Err(invalid(
                "optim.beta_max",
                "must be a nonnegative finite number",
            ));
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_fraction) {
            return Err(invalid("optim.warmup_fraction", "must lie in [0, 1]"));
        }
        positive("optim.prior_sigma", self.optim.prior_sigma)?;
        positive("optim.sigma_floor", self.optim.sigma_floor)?;
        if !(0.0..1.0).contains(&self.subspace.sparsity) {
            return Err(invalid(
                "subspace.sparsity",
                format!("must lie in [0, 1), got {}", self.subspace.sparsity),
            ));
        }
        self.subspace
            .criterion()
            .map_err(|e| invalid("subspace.criterion", e.to_string()))?;
        positive("subspace.lambda", self.subspace.lambda)?;
        nonzero("subspace.mc_samples", self.subspace.mc_samples)?;
        if !(0.0..=1.0).contains(&self.subspace.r0) {
            return Err(invalid("subspace.r0", "must lie in [0, 1]"));
        }
        positive("subspace.reinit_epsilon", self.subspace.reinit_epsilon)?;
        nonzero("eval.samples", self.eval.samples)?;
        nonzero("eval.ece_bins", self.eval.ece_bins)?;
        Ok(())
    }

    /// Active budget `s` for `d` weights.
    pub fn budget(&self, d: usize) -> usize {
        ((1.0 - self.subspace.sparsity) * d as f64)
            .round()
            .clamp(1.0, d as f64) as usize
    }

    pub fn total_steps(&self) -> usize {
        self.optim.outer_steps * self.optim.inner_steps
    }

    /// Widths of the network for `data`, input first.
    pub fn dims(&self, in_dim: usize, out_dim: usize) -> Vec<usize> {
        let mut dims = vec![in_dim];
        dims.extend(&self.model.hidden);
        dims.push(out_dim);
        dims
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.optim.lr_schedule {
            LrSchedule::Constant => self.optim.lr0,
            LrSchedule::Cosine => {
                let frac = step.min(self.total_steps()) as f64 / self.total_steps() as f64;
                0.5 * self.optim.lr0 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] InvalidField),
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        step: usize,
        what: &'static str,
        /// State just before the failing step.
        snapshot: Box<Checkpoint>,
    },
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error("active count {observed} differs from budget {budget} at step {step}")]
    Budget {
        step: usize,
        observed: usize,
        budget: usize,
    },
}

/// Objective of one φ-step. `total = nll + beta·kl_scaled`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Batch-mean negative log-likelihood.
    pub nll: f64,
    /// KL over active coordinates, unscaled.
    pub kl: f64,
    pub beta: f64,
    /// `kl` times the per-example scale.
    pub kl_scaled: f64,
    pub total: f64,
}

/// Linear ramp from 0 at step 0 to `beta_max` at `warmup_fraction·total`,
/// flat afterwards.
pub fn kl_warmup(step: usize, total: usize, beta_max: f64, warmup_fraction: f64) -> f64 {
    let end = warmup_fraction * total as f64;
    if end <= 0.0 {
        return beta_max;
    }
    beta_max * (step as f64 / end).min(1.0)
}

/// Negative ELBO of one batch and its gradient, given the noise of every
/// layer. The NLL is a batch mean, so the KL is scaled by `kl_scale`
/// (one over the training-set size) to keep both on a per-example footing.
pub fn elbo_step_with_noise(
    net: &VariationalNet,
    batch: &Batch,
    beta: f64,
    prior_sigma: f64,
    kl_scale: f64,
    noises: Vec<Array2<f64>>,
) -> Result<(ElboBreakdown, NetGrads), LayerError> {
    let tape = net.forward_with_noise(batch.x.view(), noises)?;
    let (nll, grad_out) = net.nll_and_grad(tape.output(), &batch.targets);
    let mut grads = net.backward(&tape, grad_out.view())?;
    let kl = net.kl(prior_sigma);
    if beta != 0.0 {
        net.accumulate_kl_grad(prior_sigma, beta * kl_scale, &mut grads);
    }
    let kl_scaled = kl * kl_scale;
    Ok((
        ElboBreakdown {
            nll,
            kl,
            beta,
            kl_scaled,
            total: nll + beta * kl_scaled,
        },
        grads,
    ))
}

/// [`elbo_step_with_noise`] with fresh standard normal noise.
pub fn elbo_step<R: rand::Rng + ?Sized>(
    net: &VariationalNet,
    batch: &Batch,
    beta: f64,
    prior_sigma: f64,
    kl_scale: f64,
    rng: &mut R,
) -> Result<(ElboBreakdown, NetGrads), LayerError> {
    let noises = layer_noise(net, batch.len(), rng);
    elbo_step_with_noise(net, batch, beta, prior_sigma, kl_scale, noises)
}

fn layer_noise<R: rand::Rng + ?Sized>(
    net: &VariationalNet,
    batch: usize,
    rng: &mut R,
) -> Vec<Array2<f64>> {
    net.layers
        .iter()
        .map(|l| {
            Array2::from_shape_simple_fn((l.outputs(), batch), || {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        })
        .collect()
}

/// `θ ← θ − lr·g` for μ, σ and biases, then σ is floored at
/// [`SIGMA_FLOOR`] on active coordinates and the mask is re-applied.
pub fn sgd_update(net: &mut VariationalNet, grads: &NetGrads, lr: f64) -> Result<(), LayerError> {
    sgd_update_floored(net, grads, lr, SIGMA_FLOOR)
}

/// [`sgd_update`] with an explicit σ floor.
pub fn sgd_update_floored(
    net: &mut VariationalNet,
    grads: &NetGrads,
    lr: f64,
    sigma_floor: f64,
) -> Result<(), LayerError> {
    if grads.layers.len() != net.layers.len() {
        return Err(LayerError::DimensionMismatch {
            what: "gradient layers",
            expected: (net.layers.len(), 1),
            got: (grads.layers.len(), 1),
        });
    }
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        if g.mu.dim() != layer.mu.dim() || g.sigma.dim() != layer.sigma.dim() {
            return Err(LayerError::DimensionMismatch {
                what: "weight gradient",
                expected: layer.mu.dim(),
                got: g.mu.dim(),
            });
        }
        if g.bias.len() != layer.bias.len() {
            return Err(LayerError::DimensionMismatch {
                what: "bias gradient",
                expected: (layer.bias.len(), 1),
                got: (g.bias.len(), 1),
            });
        }
        layer.mu.scaled_add(-lr, &g.mu);
        layer.sigma.scaled_add(-lr, &g.sigma);
        layer.bias.scaled_add(-lr, &g.bias);
        Zip::from(&mut layer.sigma)
            .and(&layer.mask)
            .for_each(|s, &on| {
                if on && *s < sigma_floor {
                    *s = sigma_floor;
                }
            });
        layer.apply_mask();
    }
    Ok(())
}

/// Class probabilities `[n × C]` for row-major inputs `[n × in]`, averaged
/// over `n_samples` sampled forwards.
pub fn predict<R: rand::Rng + ?Sized>(
    net: &VariationalNet,
    x: &Array2<f64>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Array2<f64>, LayerError> {
    let xt = x.t();
    let mut acc: Option<Array2<f64>> = None;
    for _ in 0..n_samples.max(1) {
        let tape = net.forward(xt, rng)?;
        let p = softmax_columns(tape.output());
        match &mut acc {
            Some(a) => *a += &p,
            None => acc = Some(p),
        }
    }
    let mut probs = acc.expect("at least one sample").reversed_axes();
    probs /= n_samples.max(1) as f64;
    // renormalize so rows sum to one despite the averaging round-off
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    Ok(probs.as_standard_layout().to_owned())
}

/// Sampled regression outputs `[n_samples × n]`.
pub fn predict_values<R: rand::Rng + ?Sized>(
    net: &VariationalNet,
    x: &Array2<f64>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Array2<f64>, LayerError> {
    let mut out = Array2::zeros((n_samples, x.nrows()));
    for mut row in out.rows_mut() {
        let tape = net.forward(x.t(), rng)?;
        row.assign(&tape.output().row(0));
    }
    Ok(out)
}

/// Test-set statistics of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub nll: f64,
    pub acc: Option<f64>,
    pub ece: Option<f64>,
    pub rmse: Option<f64>,
}

/// Accuracy, NLL and ECE (classification) or RMSE and mixture NLL
/// (regression) with `n_samples` posterior draws.
pub fn evaluate<R: rand::Rng + ?Sized>(
    net: &VariationalNet,
    data: &crate::data::Dataset,
    n_samples: usize,
    ece_bins: usize,
    rng: &mut R,
) -> Result<EvalSummary, TrainError> {
    match (&data.targets, net.head) {
        (Targets::Classes { labels, .. }, Head::Classification { .. }) => {
            let probs = predict(net, &data.features, n_samples, rng)?;
            let (acc, nll) = metrics::accuracy_nll(probs.view(), labels)
                .map_err(|e| TrainError::Data(e.to_string()))?;
            let (conf, ok) = metrics::confidences(probs.view(), labels);
            let ece = metrics::ece(&conf, &ok, EceConfig { n_bins: ece_bins })
                .map_err(|e| TrainError::Data(e.to_string()))?;
            Ok(EvalSummary {
                nll,
                acc: Some(acc),
                ece: Some(ece),
                rmse: None,
            })
        }
        (Targets::Values(ys), Head::Regression { noise_sigma }) => {
            let draws = predict_values(net, &data.features, n_samples, rng)?;
            let mean = draws.mean_axis(Axis(0)).expect("n_samples >= 1");
            let n = ys.len() as f64;
            let rmse = (mean
                .iter()
                .zip(ys)
                .map(|(m, y)| (m - y).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            let log_norm = -0.5 * (2.0 * PI).ln() - noise_sigma.ln();
            let mut nll = 0.0;
            for (j, y) in ys.iter().enumerate() {
                let logs: Vec<f64> = draws
                    .column(j)
                    .iter()
                    .map(|f| log_norm - 0.5 * ((y - f) / noise_sigma).powi(2))
                    .collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse =
                    m + (logs.iter().map(|l| (l - m).exp()).sum::<f64>() / logs.len() as f64).ln();
                nll -= lse;
            }
            Ok(EvalSummary {
                nll: nll / n,
                acc: None,
                ece: None,
                rmse: Some(rmse),
            })
        }
        _ => Err(TrainError::Data(
            "targets do not match the network head".into(),
        )),
    }
}

/// One mask update as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEvent {
    pub step: usize,
    pub gamma_update: usize,
    pub removed_count: usize,
    pub added_count: usize,
    pub criterion: String,
    /// `|γ_new ∩ γ_old| / s`.
    pub overlap_with_previous: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reinit_fallback_layers: Vec<usize>,
}

/// Streamed to the caller of [`Trainer::run_with`] as the run progresses.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Mask(&'a MaskEvent),
    Metrics(&'a MetricsRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: VariationalNet,
    pub mask: Mask,
    pub records: Vec<MetricsRecord>,
    pub mask_events: Vec<MaskEvent>,
    pub flops: metrics::FlopsEstimate,
    /// Final state, RNG positions included.
    pub checkpoint: Checkpoint,
}

/// Training state. [`Trainer::run`] executes the full schedule; the
/// step-level methods exist for inspection and tests.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainTest,
    criterion: CriterionKind,
    net: VariationalNet,
    mask: Mask,
    flops_model: FlopsModel,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    flops: f64,
    pending_iou: Option<IouSnapshot>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainTest) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(TrainError::Data(
                "train and test sets must be nonempty".into(),
            ));
        }
        if data.train.in_dim() != data.test.in_dim() {
            return Err(TrainError::Data(
                "train and test feature widths differ".into(),
            ));
        }
        let head = match data.train.targets {
            Targets::Classes { classes, .. } => Head::Classification { classes },
            Targets::Values(_) => Head::Regression {
                noise_sigma: cfg.model.noise_sigma,
            },
        };
        let dims = cfg.dims(data.train.in_dim(), data.train.out_dim());
        let mut net = VariationalNet::init(
            &dims,
            head,
            cfg.model.sigma_init,
            &mut stream_rng(cfg.seed, streams::INIT),
        );
        let shapes: Vec<(usize, usize)> = net
            .layers
            .iter()
            .map(|l| (l.outputs(), l.inputs()))
            .collect();
        let d = net.num_weights();
        let s = cfg.budget(d);
        let mask = if s < d {
            subspace::init_mask(&shapes, s, &mut stream_rng(cfg.seed, streams::MASK))?
        } else {
            Mask::dense(&shapes)
        };
        mask.apply_to(&mut net)?;
        let criterion = cfg
            .subspace
            .criterion()
            .map_err(|e| invalid("subspace.criterion", e.to_string()))?;
        let seed = cfg.seed;
        Ok(Self {
            criterion,
            flops_model: FlopsModel::new(&dims, s),
            net,
            mask,
            batch_rng: stream_rng(seed, streams::BATCH),
            noise_rng: stream_rng(seed, streams::NOISE),
            probe_rng: stream_rng(seed, streams::PROBE),
            eval_rng: stream_rng(seed, streams::EVAL),
            order: (0..data.train.len()).collect(),
            cursor: usize::MAX,
            step: 0,
            flops: 0.0,
            pending_iou: None,
            data,
            cfg,
        })
    }

    pub fn net(&self) -> &VariationalNet {
        &self.net
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Next minibatch of an epoch-wise shuffled pass over the training set;
    /// the last batch of an epoch may be short.
    fn next_batch(&mut self) -> Batch {
        let n = self.order.len();
        if self.cursor >= n {
            self.order.shuffle(&mut self.batch_rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.optim.batch_size).min(n);
        let batch = self.data.train.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        batch
    }

    /// Random training subset used by the addition probe.
    fn probe_batch(&mut self) -> Batch {
        let n = self.data.train.len();
        let k = self.cfg.optim.batch_size.min(n);
        let idx = rand::seq::index::sample(&mut self.probe_rng, n, k).into_vec();
        self.data.train.batch(&idx)
    }

    pub fn beta(&self) -> f64 {
        kl_warmup(
            self.step,
            self.cfg.total_steps(),
            self.cfg.optim.beta_max,
            self.cfg.optim.warmup_fraction,
        )
    }

    /// State for serialization.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step as u64,
            rngs: [
                &self.batch_rng,
                &self.noise_rng,
                &self.probe_rng,
                &self.eval_rng,
            ]
            .into_iter()
            .map(RngState::of)
            .collect(),
            net: self.net.clone(),
        }
    }

    /// One SGD step on φ.
    pub fn phi_step(&mut self) -> Result<ElboBreakdown, TrainError> {
        let batch = self.next_batch();
        let beta = self.beta();
        let lr = self.cfg.lr_at(self.step);
        let kl_scale = 1.0 / self.data.train.len() as f64;
        let (elbo, grads) = elbo_step(
            &self.net,
            &batch,
            beta,
            self.cfg.optim.prior_sigma,
            kl_scale,
            &mut self.noise_rng,
        )?;
        let what = if !elbo.total.is_finite() {
            Some("loss")
        } else if !grads.all_finite() {
            Some("gradient")
        } else {
            None
        };
        if let Some(what) = what {
            log::error!(
                "non-finite {what} at step {}: nll {} kl {} beta {beta}",
                self.step,
                elbo.nll,
                elbo.kl
            );
            return Err(TrainError::NonFinite {
                step: self.step,
                what,
                snapshot: Box::new(self.checkpoint()),
            });
        }
        sgd_update_floored(&mut self.net, &grads, lr, self.cfg.optim.sigma_floor)?;
        self.step += 1;
        self.flops += self.flops_model.step(self.cfg.optim.batch_size);
        Ok(elbo)
    }

    /// Addition scores: mean `|batch-mean gradient|` over the estimator's
    /// draws.
    fn addition_scores(&mut self) -> Result<Vec<f64>, TrainError> {
        let estimator = self.cfg.subspace.addition();
        let mode = match estimator {
            AdditionEstimator::OneStepMean => ProbeMode::Mean,
            _ => ProbeMode::Sampled,
        };
        let samples = estimator.samples();
        let mut total = vec![0.0; self.net.num_weights()];
        for _ in 0..samples {
            let batch = self.probe_batch();
            let scores = self
                .net
                .dense_grad_probe(&batch, mode, &mut self.probe_rng)?;
            for (t, s) in total.iter_mut().zip(scores) {
                *t += s;
            }
        }
        if samples > 1 {
            for t in &mut total {
                *t /= samples as f64;
            }
        }
        self.flops += self.flops_model.probe(self.cfg.optim.batch_size, samples);
        Ok(total)
    }

    pub fn replacement_rate(&self, t: usize) -> f64 {
        subspace::replacement_rate(
            t,
            &ReplacementSchedule {
                r0: self.cfg.subspace.r0,
                total: self.cfg.optim.outer_steps,
                decay: self.cfg.subspace.decay,
            },
        )
    }

    /// Removal and addition of `K_t` coordinates, then σ re-initialization of
    /// the added ones. A no-op on a dense subspace.
    pub fn gamma_update(&mut self, t: usize) -> Result<MaskEvent, TrainError> {
        let d = self.mask.dim();
        let s = self.mask.budget();
        let mut event = MaskEvent {
            step: self.step,
            gamma_update: t,
            removed_count: 0,
            added_count: 0,
            criterion: self.criterion.name().to_string(),
            overlap_with_previous: 1.0,
            reinit_fallback_layers: Vec::new(),
        };
        if s >= d {
            return Ok(event);
        }
        let k = subspace::replacement_count(self.replacement_rate(t), s, d);
        let quota = Quota::for_ranking(k, &self.mask, self.cfg.subspace.ranking);
        if self.cfg.subspace.track_iou {
            let kinds = CriterionKind::all(self.cfg.subspace.lambda);
            let sets = kinds
                .iter()
                .map(|&kind| subspace::removal_candidates(&self.mask, &self.net, &quota, kind))
                .collect::<Result<Vec<_>, _>>()?;
            self.pending_iou = Some(IouSnapshot::from_sets(
                kinds.iter().map(|c| c.name().to_string()).collect(),
                &sets,
            ));
        }
        let previous = self.mask.clone();
        let removal = subspace::removal(&self.mask, &mut self.net, &quota, self.criterion)?;
        let scores = self.addition_scores()?;
        let (next, added) = subspace::addition(&removal.mask, &scores, &removal.refill)?;
        next.apply_to(&mut self.net)?;
        let report =
            subspace::reinit_sigma(&mut self.net, &next, &added, self.cfg.subspace.reinit());
        self.mask = next;
        let observed = self.net.active();
        if observed != s || self.mask.active() != s {
            return Err(TrainError::Budget {
                step: self.step,
                observed,
                budget: s,
            });
        }
        event.removed_count = removal.removed.len();
        event.added_count = added.len();
        event.overlap_with_previous = self.mask.overlap(&previous);
        event.reinit_fallback_layers = report.fallback_layers;
        Ok(event)
    }

    fn record(&mut self, t: usize, last: ElboBreakdown) -> Result<MetricsRecord, TrainError> {
        let summary = evaluate(
            &self.net,
            &self.data.test,
            self.cfg.eval.samples,
            self.cfg.eval.ece_bins,
            &mut self.eval_rng,
        )?;
        Ok(MetricsRecord {
            step: self.step,
            gamma_update: t,
            beta: last.beta,
            lr: self.cfg.lr_at(self.step.saturating_sub(1)),
            r_t: self.replacement_rate(t),
            nll: summary.nll,
            kl: self.net.kl(self.cfg.optim.prior_sigma),
            acc: summary.acc,
            ece: summary.ece,
            rmse: summary.rmse,
            sparsity: 1.0 - self.net.active() as f64 / self.mask.dim() as f64,
            active: self.net.active(),
            flops_est: self.flops,
            train: last,
            iou: self.pending_iou.take(),
        })
    }

    /// Full schedule, reporting every mask update and evaluation to `on_event`.
    pub fn run_with(
        mut self,
        mut on_event: impl FnMut(TrainEvent<'_>),
    ) -> Result<TrainOutput, TrainError> {
        let mut records = Vec::with_capacity(self.cfg.optim.outer_steps);
        let mut events = Vec::with_capacity(self.cfg.optim.outer_steps);
        for t in 0..self.cfg.optim.outer_steps {
            let mut last = ElboBreakdown::default();
            for _ in 0..self.cfg.optim.inner_steps {
                last = self.phi_step()?;
            }
            let event = self.gamma_update(t)?;
            on_event(TrainEvent::Mask(&event));
            events.push(event);
            let record = self.record(t, last)?;
            on_event(TrainEvent::Metrics(&record));
            records.push(record);
        }
        let flops = metrics::flops_estimate(&self.net.dims(), &self.cfg);
        let checkpoint = self.checkpoint();
        Ok(TrainOutput {
            checkpoint,
            net: self.net,
            mask: self.mask,
            records,
            mask_events: events,
            flops,
        })
    }

    pub fn run(self) -> Result<TrainOutput, TrainError> {
        self.run_with(|_| {})
    }
}

/// Build and run a trainer.
pub fn train(cfg: &TrainConfig, data: &TrainTest) -> Result<TrainOutput, TrainError> {
    Trainer::new(cfg.clone(), data)?.run()
}

/// Serialize records as JSON lines.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// Labels of a batch, if it is a classification batch.
pub fn batch_labels(batch: &Batch) -> Option<&[usize]> {
    match &batch.targets {
        BatchTargets::Classes(l) => Some(l),
        BatchTargets::Values(_) => None,
    }
}
