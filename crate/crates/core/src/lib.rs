//! Differentiable structured sparsity through multiplicative group gating.
//!
//! Every weight group `w_j` is written as a primary vector times `D - 1`
//! scalar gates, `w_j = omega_j * gamma_{j,1} * ... * gamma_{j,D-1}`. Plain
//! L2 regularization of the factors then induces the non-smooth group
//! penalty `sum_j ||w_j||_2^{2/D}` on the product, so ordinary (stochastic)
//! gradient descent produces exact group zeros.
//!
//! The crate is `no_std` and only needs `alloc`. It contains:
//!
//! - [`numerics`]: dense vectors/matrices, power iteration, seeded RNG.
//! - [`grouping`]: the partition of penalized weights into groups.
//! - [`gating`]: the gated decomposition, penalties, balance diagnostics and
//!   chain-rule gradients.
//! - [`models`]: differentiable losses over effective weights (grouped linear
//!   regression, a small rectifier MLP, and the two-feature toy objective).
//! - [`optim`]: SGD with momentum, an RK4 gradient-flow integrator, an
//!   accelerated proximal group-lasso solver and direct subgradient descent.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
pub mod gating;
pub mod grouping;
pub mod models;
pub mod numerics;
pub mod optim;

pub use error::{Error, Result};
pub use gating::{BalanceReport, GatedGradient, GatedParams};
pub use grouping::GroupPartition;
pub use models::{Dataset, Evaluation, GroupedModel, LinearModel, MlpGrouping, MlpModel, Targets, ToyObjective};
pub use numerics::{DenseMatrix, DenseVector, Rng};
