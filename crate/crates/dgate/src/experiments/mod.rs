//! Experiment runners.
//!
//! - [`path`]: regularization paths on group-sparse regression.
//! - [`decay`]: imbalance and loss-gap decay under flow or SGD.
//! - [`toy`]: the two-feature toy problem, direct (sub)gradient descent next
//!   to the gated run.

pub mod decay;
pub mod path;
pub mod toy;

use dgate_core::gating::nonsmooth_penalty;
use dgate_core::numerics::dot;
use dgate_core::{Dataset, DenseVector, GroupPartition, Rng};

use crate::error::Result;

/// `omega` entries drawn from `N(0, 1/p)`.
pub fn init_omega(p: usize, rng: &mut Rng) -> DenseVector {
    let sd = 1.0 / (p.max(1) as f64).sqrt();
    (0..p).map(|_| sd * rng.gauss()).collect()
}

/// `sum_i (y_i - x_i^T w)^2`.
pub fn squared_loss(data: &Dataset, w: &[f64]) -> Result<f64> {
    let y = data.y()?;
    let x = data.x();
    let mut total = 0.0;
    for i in 0..data.n() {
        let r = y[i] - dot(x.row(i), w)?;
        total += r * r;
    }
    Ok(total)
}

/// Root mean squared prediction error.
pub fn rmse(data: &Dataset, w: &[f64]) -> Result<f64> {
    Ok((squared_loss(data, w)? / data.n() as f64).sqrt())
}

/// `sum_i (y_i - x_i^T w)^2 + lambda sum_j ||w_j||^{2/D}`.
pub fn penalized_objective(data: &Dataset, partition: &GroupPartition, w: &[f64], lambda: f64, depth: usize) -> Result<f64> {
    Ok(squared_loss(data, w)? + lambda * nonsmooth_penalty(w, partition, depth)?)
}
