//! Two-feature toy problem: plain (sub)gradient descent on
//! `(y - x1 w1 - x2 w2)^2 + lambda ||w||^{2/D}` next to the gated run.

use std::fmt;

use dgate_core::optim::{sgd_train_observed, LrSchedule, TrainConfig};
use dgate_core::{Error as CoreError, ToyObjective};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub depths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    pub x1: f64,
    pub x2: f64,
    pub y: f64,
    pub start: [f64; 2],
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            depths: vec![2, 3, 4],
            lambdas: vec![0.5],
            steps: 2000,
            lr: 0.01,
            x1: 1.0,
            x2: 0.5,
            y: 0.05,
            start: [0.5, -0.3],
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.depths.is_empty() || self.depths.iter().any(|&d| d < 2) {
            return Err(Error::config("depths must be nonempty and at least 2"));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambdas must be nonempty, finite and nonnegative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }

    pub fn objective(&self, depth: usize, lambda: f64) -> ToyObjective {
        ToyObjective {
            x1: self.x1,
            x2: self.x2,
            y: self.y,
            depth,
            lambda,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyMethod {
    Direct,
    Gated,
}

impl fmt::Display for ToyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyMethod::Direct => "direct",
            ToyMethod::Gated => "gated",
        })
    }
}

/// Effective weights at steps `0..=steps` (fewer if the run diverged).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrajectory {
    pub depth: usize,
    pub lambda: f64,
    pub method: ToyMethod,
    pub points: Vec<[f64; 2]>,
    pub diverged: bool,
}

impl ToyTrajectory {
    pub fn final_norm(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |w| w[0].hypot(w[1]))
    }
}

/// Gradient descent with the toy objective's own (sub)gradient.
pub fn direct_trajectory(obj: &ToyObjective, start: [f64; 2], steps: usize, lr: f64) -> ToyTrajectory {
    let mut w = start;
    let mut points = Vec::with_capacity(steps + 1);
    points.push(w);
    let mut diverged = false;
    for _ in 0..steps {
        let (_, g) = obj.loss_grad(w);
        w = [w[0] - lr * g[0], w[1] - lr * g[1]];
        if !(w[0].is_finite() && w[1].is_finite()) {
            diverged = true;
            break;
        }
        points.push(w);
    }
    ToyTrajectory {
        depth: obj.depth,
        lambda: obj.lambda,
        method: ToyMethod::Direct,
        points,
        diverged,
    }
}

/// Plain gradient descent on the gated form, gates starting at one and
/// `omega` at `start`.
pub fn gated_trajectory(obj: &ToyObjective, start: [f64; 2], steps: usize, lr: f64) -> Result<ToyTrajectory> {
    let (model, data) = obj.as_linear();
    let cfg = TrainConfig {
        lambda: obj.lambda,
        depth: obj.depth,
        iters: steps,
        batch_size: 1,
        lr_schedule: LrSchedule::Constant { lr },
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let mut points = Vec::with_capacity(steps + 1);
    let result = sgd_train_observed(&model, &data, &cfg, &start, &[], 0, &mut |_, p, _| {
        let w = p.collapse();
        points.push([w[0], w[1]]);
    });
    let diverged = match result {
        Ok(_) => false,
        Err(CoreError::Diverged { .. }) => true,
        Err(e) => return Err(e.into()),
    };
    if diverged {
        points.retain(|w| w[0].is_finite() && w[1].is_finite());
    }
    Ok(ToyTrajectory {
        depth: obj.depth,
        lambda: obj.lambda,
        method: ToyMethod::Gated,
        points,
        diverged,
    })
}

/// Direct and gated trajectories for every `(depth, lambda)`, in that order.
pub fn run_toy(spec: &ToySpec) -> Result<Vec<ToyTrajectory>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &depth in &spec.depths {
        for &lambda in &spec.lambdas {
            let obj = spec.objective(depth, lambda);
            out.push(direct_trajectory(&obj, spec.start, spec.steps, spec.lr));
            out.push(gated_trajectory(&obj, spec.start, spec.steps, spec.lr)?);
        }
    }
    Ok(out)
}

/// Sign changes of the step-to-step differences of `||w||` over the last
/// `tail` fraction of the trajectory.
pub fn oscillation_count(points: &[[f64; 2]], tail: f64) -> usize {
    let start = ((points.len() as f64) * (1.0 - tail.clamp(0.0, 1.0))) as usize;
    let norms: Vec<f64> = points[start..].iter().map(|w| w[0].hypot(w[1])).collect();
    let diffs: Vec<f64> = norms.windows(2).map(|p| p[1] - p[0]).filter(|d| *d != 0.0).collect();
    diffs.windows(2).filter(|d| d[0].signum() != d[1].signum()).count()
}
