//! Sparse subspace variational inference for Bayesian MLPs.
//!
//! A mean-field Gaussian network is trained only on a fixed-size set of
//! active weights. Every `M` SGD steps the least important active weights
//! (ranked by a closed-form statistic of their posterior) are swapped for
//! the inactive weights with the largest loss gradient.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gaussian_stats;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod subspace;
pub mod trainer;

pub use gaussian_stats::{CriterionKind, GaussParam};
pub use layers::BayesLinear;
pub use net::{Head, VariationalNet};
pub use subspace::Mask;
pub use trainer::{train, TrainConfig, TrainOutput, Trainer};
