//! Multi-layer perceptron built from [`BayesLinear`] layers with ReLU between
//! them and either a softmax cross-entropy or a fixed-noise Gaussian head.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::gaussian_stats::{kl_gauss_to_prior, kl_gauss_to_prior_grad, GaussParam};
use crate::layers::{BayesLinear, ForwardTape, LayerError};

/// Output head and its likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Classification { classes: usize },
    Regression { noise_sigma: f64 },
}

/// Minibatch in column layout: `x` is `[in × B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub targets: BatchTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<ParamGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &VariationalNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| ParamGrads {
                    mu: Array2::zeros(l.mu.raw_dim()),
                    sigma: Array2::zeros(l.sigma.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.mu.iter()
                .chain(g.sigma.iter())
                .chain(g.bias.iter())
                .all(|v| v.is_finite())
        })
    }
}

/// Per-layer tapes plus the sampled pre-activations needed for ReLU.
#[derive(Debug, Clone)]
pub struct NetTape {
    pub layers: Vec<ForwardTape>,
    /// Sampled outputs of every layer (pre-ReLU for hidden ones).
    pub outputs: Vec<Array2<f64>>,
}

impl NetTape {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }
}

/// Whether the gradient probe samples θ from the posterior or uses θ = μ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    Sampled,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    pub layers: Vec<BayesLinear>,
    pub head: Head,
}

impl VariationalNet {
    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs()];
        dims.extend(self.layers.iter().map(BayesLinear::outputs));
        dims
    }

    /// Total number of maskable weight coordinates `d`.
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(BayesLinear::len).sum()
    }

    pub fn active(&self) -> usize {
        self.layers.iter().map(BayesLinear::active).sum()
    }

    /// Fresh dense network. `μ` is fan-in scaled uniform, `σ` is drawn from
    /// `N(m, (m/10)²)` truncated to positive values, biases start at zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], head: Head, sigma_mean: f64, rng: &mut R) -> Self {
        assert!(
            dims.len() >= 2,
            "need at least an input and an output width"
        );
        assert!(sigma_mean > 0.0, "sigma init mean must be positive");
        let sigma_dist = Normal::new(sigma_mean, sigma_mean / 10.0).expect("valid normal");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let uni = Uniform::new_inclusive(-bound, bound).expect("valid range");
                let mut layer = BayesLinear::zeros(fan_in, fan_out);
                layer.mu.iter_mut().for_each(|m| *m = uni.sample(rng));
                layer.sigma.iter_mut().for_each(|s| {
                    *s = loop {
                        let v = sigma_dist.sample(rng);
                        if v > 0.0 {
                            break v;
                        }
                    }
                });
                layer
            })
            .collect();
        Self { layers, head }
    }

    /// Sampled forward through the whole network, one fresh `ε` per layer.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<NetTape, LayerError> {
        let batch = x.ncols();
        let noises = self
            .layers
            .iter()
            .map(|l| {
                Array2::from_shape_simple_fn((l.outputs(), batch), || {
                    rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        self.forward_with_noise(x, noises)
    }

    pub fn forward_with_noise(
        &self,
        x: ArrayView2<'_, f64>,
        noises: Vec<Array2<f64>>,
    ) -> Result<NetTape, LayerError> {
        assert_eq!(
            noises.len(),
            self.layers.len(),
            "one noise matrix per layer"
        );
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut input = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, (layer, noise)) in self.layers.iter().zip(noises).enumerate() {
            let (y, tape) = layer.forward_with_noise(input.view(), noise)?;
            if i < last {
                input = y.mapv(relu);
            }
            tapes.push(tape);
            outputs.push(y);
        }
        Ok(NetTape {
            layers: tapes,
            outputs,
        })
    }

    /// Backpropagate `∂L/∂output` through every layer.
    pub fn backward(
        &self,
        tape: &NetTape,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<NetGrads, LayerError> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let g = self.layers[i].lrt_backward(&tape.layers[i], upstream.view())?;
            if i > 0 {
                let mut d = g.input;
                Zip::from(&mut d)
                    .and(&tape.outputs[i - 1])
                    .for_each(|d, &pre| {
                        if pre <= 0.0 {
                            *d = 0.0;
                        }
                    });
                upstream = d;
            }
            grads.push(ParamGrads {
                mu: g.mu,
                sigma: g.sigma,
                bias: g.bias,
            });
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }

    /// `Σ_i γ_i KL(q(θ_i) ‖ N(0, σ_p²))` over active coordinates.
    pub fn kl(&self, prior_sigma: f64) -> f64 {
        let mut total = 0.0;
        for layer in &self.layers {
            Zip::from(&layer.mu)
                .and(&layer.sigma)
                .and(&layer.mask)
                .for_each(|&m, &s, &keep| {
                    if keep {
                        total += kl_gauss_to_prior(GaussParam::new(m, s), prior_sigma)
                            .unwrap_or(f64::INFINITY);
                    }
                });
        }
        total
    }

    /// Add `scale · ∂KL/∂(μ, σ)` for active coordinates into `grads`.
    pub fn accumulate_kl_grad(&self, prior_sigma: f64, scale: f64, grads: &mut NetGrads) {
        for (layer, g) in self.layers.iter().zip(&mut grads.layers) {
            Zip::from(&mut g.mu)
                .and(&mut g.sigma)
                .and(&layer.mu)
                .and(&layer.sigma)
                .and(&layer.mask)
                .for_each(|gm, gs, &m, &s, &keep| {
                    if keep {
                        let (dm, ds) = kl_gauss_to_prior_grad(GaussParam::new(m, s), prior_sigma);
                        *gm += scale * dm;
                        *gs += scale * ds;
                    }
                });
        }
    }

    /// Mean negative log-likelihood of `output` and its gradient w.r.t. `output`.
    pub fn nll_and_grad(&self, output: &Array2<f64>, targets: &BatchTargets) -> (f64, Array2<f64>) {
        match (self.head, targets) {
            (Head::Classification { .. }, BatchTargets::Classes(labels)) => {
                softmax_cross_entropy(output, labels)
            }
            (Head::Regression { noise_sigma }, BatchTargets::Values(values)) => {
                gaussian_nll(output, values, noise_sigma)
            }
            _ => panic!("targets do not match the network head"),
        }
    }

    /// Per-coordinate `|(1/B) Σ_i ∇_θ f_θ(x_i)|` over the full dense weight
    /// space. Masked weights take part in the forward with value 0, so they
    /// still receive a gradient. `Sampled` draws one θ ~ q for the batch;
    /// `Mean` uses θ = μ. Returned in flat coordinate order.
    pub fn dense_grad_probe<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        mode: ProbeMode,
        rng: &mut R,
    ) -> Result<Vec<f64>, LayerError> {
        let point = self.point_net(mode, rng);
        let noises = point
            .layers
            .iter()
            .map(|l| Array2::zeros((l.outputs(), batch.len())))
            .collect();
        let tape = point.forward_with_noise(batch.x.view(), noises)?;
        let (_, grad_out) = point.nll_and_grad(tape.output(), &batch.targets);
        let grads = point.backward(&tape, grad_out.view())?;
        Ok(grads
            .layers
            .iter()
            .flat_map(|g| g.mu.iter().map(|v| v.abs()).collect::<Vec<_>>())
            .collect())
    }

    /// Deterministic copy carrying a single weight draw (or the mean) with
    /// `σ = 0` and an all-ones mask.
    fn point_net<R: Rng + ?Sized>(&self, mode: ProbeMode, rng: &mut R) -> VariationalNet {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut theta = l.mu.clone();
                if mode == ProbeMode::Sampled {
                    Zip::from(&mut theta).and(&l.sigma).for_each(|t, &s| {
                        let eta: f64 = rng.sample(StandardNormal);
                        *t += s * eta;
                    });
                }
                Zip::from(&mut theta).and(&l.mask).for_each(|t, &keep| {
                    if !keep {
                        *t = 0.0;
                    }
                });
                BayesLinear {
                    mu: theta,
                    sigma: Array2::zeros(l.sigma.raw_dim()),
                    bias: l.bias.clone(),
                    mask: Array2::from_elem(l.mask.raw_dim(), true),
                }
            })
            .collect();
        VariationalNet {
            layers,
            head: self.head,
        }
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Column-wise softmax of `[C × B]` logits.
pub fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut col in p.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    p
}

fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.ncols();
    assert_eq!(labels.len(), batch, "one label per column");
    let mut grad = softmax_columns(logits);
    let mut nll = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let col = logits.column(b);
        let max = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - col[y];
        grad[(y, b)] -= 1.0;
    }
    grad /= batch as f64;
    (nll / batch as f64, grad)
}

fn gaussian_nll(output: &Array2<f64>, values: &[f64], noise_sigma: f64) -> (f64, Array2<f64>) {
    let batch = output.ncols();
    assert_eq!(output.nrows(), 1, "regression head has one output");
    assert_eq!(values.len(), batch, "one target per column");
    let var = noise_sigma * noise_sigma;
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut grad = Array2::zeros(output.raw_dim());
    let mut nll = 0.0;
    for (b, &y) in values.iter().enumerate() {
        let r = output[(0, b)] - y;
        nll += 0.5 * r * r / var + log_norm;
        grad[(0, b)] = r / (var * batch as f64);
    }
    (nll / batch as f64, grad)
}
