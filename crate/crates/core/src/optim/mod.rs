//! Training engines for gated and ungated objectives.
//!
//! - [`sgd_train`]: mini-batch SGD with momentum on the gated objective.
//! - [`sgd_step_exact`]: one vanilla full step, for studying the discrete
//!   imbalance recursion in isolation.
//! - [`flow_integrate`]: classical RK4 on the gradient flow.
//! - [`FistaSolver`]: accelerated proximal gradient for the group lasso
//!   (depth 2 only), used as the reference solution.
//! - [`subgrad_direct`]: plain subgradient descent on the non-smooth penalty.

mod fista;
mod flow;
mod sgd;
mod subgrad;

use alloc::vec;
use alloc::vec::Vec;

pub use fista::{block_soft_threshold, fista_group_lasso, group_lasso_objective, FistaOutcome, FistaSolver};
pub use flow::{flow_integrate, flow_integrate_observed, FlowOutcome};
pub use sgd::{sgd_step_exact, sgd_train, sgd_train_observed, TrainOutcome};
pub use subgrad::{subgrad_direct, subgrad_direct_observed, DirectOutcome};

use crate::error::{invalid, Result};
use crate::gating::{nonsmooth_penalty, GatedParams};
use crate::grouping::EPS_TINY_LINEAR;
use crate::models::{Dataset, GroupedModel};
use crate::numerics::Rng;

/// Step-size schedule over `iters` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "kebab-case")
)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `initial * (1 + cos(pi t / T)) / 2`.
    Cosine { initial: f64 },
}

impl LrSchedule {
    pub fn initial(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { initial } => initial,
        }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { initial } => {
                let frac = step as f64 / total.max(1) as f64;
                initial * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

/// Hyperparameters shared by [`sgd_train`] and [`subgrad_direct`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct TrainConfig {
    pub lambda: f64,
    pub depth: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub nesterov: bool,
    pub eps_tiny: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Full-batch linear-regression defaults: 1500 iterations, cosine decay
    /// from 0.05, heavy-ball momentum 0.9, zero threshold 1e-6.
    fn default() -> Self {
        Self {
            lambda: 0.0,
            depth: 2,
            iters: 1500,
            batch_size: usize::MAX,
            lr_schedule: LrSchedule::Cosine { initial: 5e-2 },
            momentum: 0.9,
            nesterov: false,
            eps_tiny: EPS_TINY_LINEAR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be finite and nonnegative"));
        }
        if self.depth < 2 {
            return Err(invalid("depth must be at least 2"));
        }
        if self.iters == 0 {
            return Err(invalid("iters must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        let lr = self.lr_schedule.initial();
        // lr = 0 is accepted: it gives the null dynamics
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.eps_tiny >= 0.0) {
            return Err(invalid("eps_tiny must be nonnegative"));
        }
        Ok(())
    }
}

/// Dynamics diagnostics at one step (iteration count or flow time).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    pub t: f64,
    /// `L0 + lambda * surrogate penalty`.
    pub loss_gated: f64,
    /// `L0 + lambda * sum_j ||w_j||^{2/D}` at the collapsed weight.
    pub loss_nonsmooth: f64,
    pub misalignment: f64,
    pub imbalance_max: f64,
    pub active_groups: usize,
}

impl TraceRecord {
    /// Diagnostics of a gated state given the data loss at its collapsed weight.
    pub fn gated(t: f64, data_loss: f64, params: &GatedParams, lambda: f64, eps_tiny: f64) -> Result<Self> {
        let w = params.collapse();
        let report = params.balance_report();
        let nonsmooth = nonsmooth_penalty(&w, params.partition(), params.depth())?;
        Ok(Self {
            t,
            loss_gated: data_loss + lambda * params.surrogate_penalty(),
            loss_nonsmooth: data_loss + lambda * nonsmooth,
            misalignment: report.misalignment,
            imbalance_max: report.imbalance_max(),
            active_groups: params.partition().active_groups(&w, eps_tiny)?.len(),
        })
    }

    /// Diagnostics of an ungated weight; the gated and non-smooth losses coincide.
    pub fn direct(
        t: f64,
        data_loss: f64,
        w: &[f64],
        partition: &crate::GroupPartition,
        depth: usize,
        lambda: f64,
        eps_tiny: f64,
    ) -> Result<Self> {
        let loss = data_loss + lambda * nonsmooth_penalty(w, partition, depth)?;
        Ok(Self {
            t,
            loss_gated: loss,
            loss_nonsmooth: loss,
            misalignment: 0.0,
            imbalance_max: 0.0,
            active_groups: partition.active_groups(w, eps_tiny)?.len(),
        })
    }

    /// `loss_gated - loss_nonsmooth`, which equals `lambda * misalignment`.
    pub fn loss_gap(&self) -> f64 {
        self.loss_gated - self.loss_nonsmooth
    }
}

/// Full-data diagnostics of a gated state.
pub fn gated_trace_record<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    params: &GatedParams,
    v: &[f64],
    lambda: f64,
    t: f64,
    eps_tiny: f64,
) -> Result<TraceRecord> {
    let w = params.collapse();
    let loss = model.loss(data, &w, v, None)?;
    TraceRecord::gated(t, loss, params, lambda, eps_tiny)
}

/// Epoch-wise shuffling without replacement. When the batch covers the
/// whole dataset the sampler yields `None` (full batch) and never draws.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch_size,
            rng: Rng::seed_from_u64(seed),
        }
    }

    fn full_batch(&self) -> bool {
        self.batch_size >= self.order.len()
    }

    fn next(&mut self) -> Option<&[usize]> {
        if self.full_batch() {
            return None;
        }
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = &self.order[self.pos..end];
        self.pos = end;
        Some(batch)
    }
}

/// Heavy-ball / Nesterov momentum on a flat parameter vector, matching the
/// common deep-learning form `b <- mu b + g`, `x <- x - lr (g + mu b)` or
/// `x <- x - lr b`.
struct Momentum {
    buf: Vec<f64>,
    mu: f64,
    nesterov: bool,
}

impl Momentum {
    fn new(len: usize, mu: f64, nesterov: bool) -> Self {
        Self {
            buf: vec![0.0; len],
            mu,
            nesterov,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        if self.mu == 0.0 {
            x.iter_mut().zip(grad).for_each(|(x, g)| *x -= lr * g);
            return;
        }
        for ((x, b), &g) in x.iter_mut().zip(self.buf.iter_mut()).zip(grad) {
            *b = self.mu * *b + g;
            let d = if self.nesterov { g + self.mu * *b } else { *b };
            *x -= lr * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { initial: 0.05 };
        assert_eq!(s.at(0, 100), 0.05);
        assert!((s.at(50, 100) - 0.025).abs() < 1e-15);
        assert!(s.at(100, 100).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant { lr: 0.3 }.at(7, 10), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { iters: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { depth: 1, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { lr_schedule: LrSchedule::Constant { lr: f64::NAN }, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn sampler_visits_each_sample_once_per_epoch() {
        let mut s = BatchSampler::new(10, 3, 1);
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.extend_from_slice(s.next().unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = BatchSampler::new(10, 10, 1);
        assert!(full.next().is_none());
    }

    #[test]
    fn momentum_forms() {
        let mut m = Momentum::new(1, 0.5, false);
        let mut x = [0.0];
        m.step(&mut x, &[1.0], 1.0);
        m.step(&mut x, &[1.0], 1.0);
        assert_eq!(x, [-2.5]);
        let mut n = Momentum::new(1, 0.5, true);
        let mut x = [0.0];
        n.step(&mut x, &[1.0], 1.0);
        assert_eq!(x, [-1.5]);
    }
}
