//! Masked Bayesian fully-connected layer.
//!
//! The forward pass uses the local reparameterization trick: instead of
//! sampling a weight matrix per example, it samples the pre-activation
//! directly from its Gaussian marginal,
//!
//! ```text
//! y = μ·x + sqrt((σ⊙σ)·(x⊙x)) ⊙ ε + b
//! ```
//!
//! with one standard-normal `ε` of shape `[out × B]`. The noise is kept on a
//! [`ForwardTape`] so the backward pass is a deterministic function of the tape
//! and can be checked against finite differences.
//!
//! Gradients are reported with respect to the *effective* (post-mask)
//! parameters over the full dense coordinate space. For masked coordinates the
//! σ-gradient is identically zero, which is why freshly re-activated weights
//! need their σ re-initialized before training can move them.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("dimension mismatch in {what}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("forward tape does not belong to this layer: {0}")]
    TapeMismatch(&'static str),
}

fn check_dims(
    what: &'static str,
    expected: (usize, usize),
    got: (usize, usize),
) -> Result<(), LayerError> {
    if expected == got {
        Ok(())
    } else {
        Err(LayerError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Fully-connected layer with a mean-field Gaussian over its weights and a
/// deterministic bias. Weights are stored `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesLinear {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub bias: Array1<f64>,
    pub mask: Array2<bool>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    /// `[in × B]`
    pub input: Array2<f64>,
    /// `[out × B]` standard-normal draws
    pub noise: Array2<f64>,
    /// `[out × B]`, bias included
    pub mean: Array2<f64>,
    /// `[out × B]`, always ≥ 0
    pub std: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl BayesLinear {
    /// Zero-initialized, fully unmasked layer.
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            mu: Array2::zeros((outputs, inputs)),
            sigma: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            mask: Array2::from_elem((outputs, inputs), true),
        }
    }

    pub fn inputs(&self) -> usize {
        self.mu.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.mu.nrows()
    }

    /// Number of maskable weight coordinates (`in·out`).
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Zero `μ` and `σ` wherever the mask is off.
    pub fn apply_mask(&mut self) {
        Zip::from(&mut self.mu)
            .and(&mut self.sigma)
            .and(&self.mask)
            .for_each(|m, s, &keep| {
                if !keep {
                    *m = 0.0;
                    *s = 0.0;
                }
            });
    }

    fn effective(&self) -> (Array2<f64>, Array2<f64>) {
        let mut mu = self.mu.clone();
        let mut sigma = self.sigma.clone();
        Zip::from(&mut mu)
            .and(&mut sigma)
            .and(&self.mask)
            .for_each(|m, s, &keep| {
                if !keep {
                    *m = 0.0;
                    *s = 0.0;
                }
            });
        (mu, sigma)
    }

    /// LRT forward with freshly drawn noise.
    pub fn lrt_forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardTape), LayerError> {
        let noise = Array2::from_shape_simple_fn((self.outputs(), x.ncols()), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        self.forward_with_noise(x, noise)
    }

    /// LRT forward with caller-supplied noise `ε` of shape `[out × B]`.
    pub fn forward_with_noise(
        &self,
        x: ArrayView2<'_, f64>,
        noise: Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardTape), LayerError> {
        check_dims("layer input rows", (self.inputs(), x.ncols()), x.dim())?;
        check_dims("noise", (self.outputs(), x.ncols()), noise.dim())?;
        let (mu, sigma) = self.effective();

        let mut mean = mu.dot(&x);
        mean += &self.bias.view().insert_axis(Axis(1));
        let var = sigma.mapv(|s| s * s).dot(&x.mapv(|v| v * v));
        let std = var.mapv(f64::sqrt);

        let mut y = mean.clone();
        Zip::from(&mut y)
            .and(&std)
            .and(&noise)
            .for_each(|y, &s, &e| *y += s * e);

        let tape = ForwardTape {
            input: x.to_owned(),
            noise,
            mean,
            std,
        };
        Ok((y, tape))
    }

    /// Exact backward pass of [`forward_with_noise`](Self::forward_with_noise)
    /// given `∂L/∂y`. The σ-gradient is
    /// `∂L/∂σ = ((∂L/∂y ⊙ ε / std)·(x⊙x)ᵀ) ⊙ σ`, taken as 0 where `std = 0`.
    pub fn lrt_backward(
        &self,
        tape: &ForwardTape,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<LayerGrads, LayerError> {
        let batch = tape.input.ncols();
        if tape.input.nrows() != self.inputs() {
            return Err(LayerError::TapeMismatch("input width differs from layer"));
        }
        if tape.noise.dim() != (self.outputs(), batch)
            || tape.std.dim() != (self.outputs(), batch)
            || tape.mean.dim() != (self.outputs(), batch)
        {
            return Err(LayerError::TapeMismatch("tape shapes differ from layer"));
        }
        check_dims("upstream gradient", (self.outputs(), batch), grad_out.dim())?;

        let (mu, sigma) = self.effective();
        let x = &tape.input;
        let x_sq = x.mapv(|v| v * v);

        // u = g ⊙ ε / std, defined as 0 on the std = 0 set.
        let mut u = Array2::zeros(grad_out.raw_dim());
        Zip::from(&mut u)
            .and(&grad_out)
            .and(&tape.noise)
            .and(&tape.std)
            .for_each(|u, &g, &e, &s| {
                *u = if s > 0.0 { g * e / s } else { 0.0 };
            });

        let d_mu = grad_out.dot(&x.t());
        let d_sigma = u.dot(&x_sq.t()) * &sigma;
        let d_bias = grad_out.sum_axis(Axis(1));
        let sigma_sq = sigma.mapv(|s| s * s);
        let d_input = mu.t().dot(&grad_out) + &(x * &sigma_sq.t().dot(&u));

        Ok(LayerGrads {
            mu: d_mu,
            sigma: d_sigma,
            bias: d_bias,
            input: d_input,
        })
    }

    /// Reference forward that samples a separate weight matrix for every
    /// batch column, `y_b = (μ + σ⊙η_b)·x_b + b`. Only used as a
    /// distributional oracle for the LRT path.
    pub fn naive_forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>, LayerError> {
        let eta: Vec<Array2<f64>> = (0..x.ncols())
            .map(|_| {
                Array2::from_shape_simple_fn(self.mu.raw_dim(), || {
                    rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        self.naive_forward_with_noise(x, &eta)
    }

    pub fn naive_forward_with_noise(
        &self,
        x: ArrayView2<'_, f64>,
        eta: &[Array2<f64>],
    ) -> Result<Array2<f64>, LayerError> {
        check_dims("layer input rows", (self.inputs(), x.ncols()), x.dim())?;
        if eta.len() != x.ncols() {
            return Err(LayerError::DimensionMismatch {
                what: "per-column weight noise",
                expected: (x.ncols(), 0),
                got: (eta.len(), 0),
            });
        }
        let (mu, sigma) = self.effective();
        let mut y = Array2::zeros((self.outputs(), x.ncols()));
        for (b, eta_b) in eta.iter().enumerate() {
            check_dims("weight noise", mu.dim(), eta_b.dim())?;
            let w = &mu + &(&sigma * eta_b);
            let col = w.dot(&x.column(b)) + &self.bias;
            y.column_mut(b).assign(&col);
        }
        Ok(y)
    }

    /// σ-gradient of the naive path: `∂L/∂σ_ij = Σ_b g_ib η^b_ij x_jb`.
    /// Differs from the LRT gradient even though both forwards share the same
    /// output distribution.
    pub fn naive_sigma_grad(
        &self,
        x: ArrayView2<'_, f64>,
        eta: &[Array2<f64>],
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, LayerError> {
        check_dims(
            "upstream gradient",
            (self.outputs(), x.ncols()),
            grad_out.dim(),
        )?;
        let mut d_sigma = Array2::zeros(self.mu.raw_dim());
        for (b, eta_b) in eta.iter().enumerate() {
            let g = grad_out.column(b);
            let xb = x.column(b);
            Zip::indexed(&mut d_sigma).for_each(|(i, j), d| {
                *d += g[i] * eta_b[(i, j)] * xb[j];
            });
        }
        Zip::from(&mut d_sigma)
            .and(&self.mask)
            .for_each(|d, &keep| {
                if !keep {
                    *d = 0.0;
                }
            });
        Ok(d_sigma)
    }
}
