//! Regularization paths over a lambda grid.

use std::fmt;
use std::str::FromStr;

use dgate_core::numerics::cholesky_solve;
use dgate_core::optim::{sgd_train, subgrad_direct, FistaSolver, TrainConfig};
use dgate_core::{DenseVector, Error as CoreError, GatedParams, LinearModel, Rng};
use serde::{Deserialize, Serialize};

use super::{init_omega, penalized_objective, rmse, squared_loss};
use crate::data::GroupSparseData;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// SGD on the gated objective.
    Dgating,
    /// Accelerated proximal gradient, depth 2 only.
    Fista,
    /// Direct subgradient descent on the non-smooth objective.
    Subgrad,
    /// Least squares restricted to the true support.
    OracleLs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dgating, Method::Fista, Method::Subgrad, Method::OracleLs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dgating => "dgating",
            Method::Fista => "fista",
            Method::Subgrad => "subgrad",
            Method::OracleLs => "oracle-ls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?} (expected dgating, fista, subgrad or oracle-ls)")))
    }
}

/// Ascending grid of `count` values spaced evenly in log from `min` to `max`.
pub fn lambda_grid(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || !(min > 0.0 && max >= min && max.is_finite()) {
        return Err(Error::config("log grid needs 0 < min <= max and count >= 1"));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let (a, b) = (min.ln(), max.ln());
    Ok((0..count)
        .map(|i| {
            if i == 0 {
                min
            } else if i + 1 == count {
                max
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FistaSettings {
    pub iters: usize,
    pub tol: f64,
}

impl Default for FistaSettings {
    fn default() -> Self {
        Self {
            iters: 20_000,
            tol: 1e-12,
        }
    }
}

/// What to sweep. `train.lambda`, `train.depth` and `train.seed` are set per job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSpec {
    pub methods: Vec<Method>,
    pub depths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub train: TrainConfig,
    pub fista: FistaSettings,
    /// Grid values and objectives refer to the mean squared error rather
    /// than the summed one; the core then sees `n * lambda`.
    pub mean_loss: bool,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dgating, Method::Fista, Method::Subgrad, Method::OracleLs],
            depths: vec![2, 3, 4],
            lambdas: lambda_grid(1e-5, 15.0, 30).expect("static grid"),
            train: TrainConfig::default(),
            fista: FistaSettings::default(),
            mean_loss: true,
        }
    }
}

impl PathSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("no methods given"));
        }
        if self.lambdas.is_empty() {
            return Err(Error::config("lambda grid is empty"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda values must be finite and nonnegative"));
        }
        let needs_depth = self.methods.iter().any(|m| matches!(m, Method::Dgating | Method::Subgrad));
        if needs_depth && self.depths.is_empty() {
            return Err(Error::config("no depths given"));
        }
        if self.depths.iter().any(|&d| d < 2) {
            return Err(Error::config("depths must be at least 2"));
        }
        if self.methods.contains(&Method::Fista) && !self.depths.is_empty() && !self.depths.contains(&2) {
            return Err(Error::config("fista solves the depth-2 problem only; include depth 2"));
        }
        let probe = TrainConfig {
            depth: 2,
            ..self.train.clone()
        };
        probe.validate()?;
        if self.fista.iters == 0 {
            return Err(Error::config("fista.iters must be at least 1"));
        }
        Ok(())
    }

    /// `(method, depth, lambda)` in sweep order; depth is `None` for the oracle.
    pub fn jobs(&self) -> Vec<(Method, Option<usize>, f64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &lambda in &self.lambdas {
                match m {
                    Method::Dgating | Method::Subgrad => {
                        out.extend(self.depths.iter().map(|&d| (m, Some(d), lambda)));
                    }
                    Method::Fista => out.push((m, Some(2), lambda)),
                    Method::OracleLs => out.push((m, None, lambda)),
                }
            }
        }
        out
    }
}

/// One point of a path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub lambda: f64,
    pub depth: Option<usize>,
    pub method: Method,
    /// Squared loss plus `lambda * sum_j ||w_j||^{2/D}` at the final weight;
    /// the oracle reports its squared loss.
    pub train_objective: f64,
    pub test_rmse: f64,
    pub active_group_count: usize,
    pub support: Vec<usize>,
    pub misalignment: f64,
    pub diverged: bool,
    /// Final weight (pruned for gated runs).
    pub weights: DenseVector,
    /// Final gated state of a `dgating` run.
    pub params: Option<GatedParams>,
}

fn oracle_weights(data: &GroupSparseData) -> Result<DenseVector> {
    let p = data.partition.p();
    let cols: Vec<usize> = data
        .true_support
        .iter()
        .flat_map(|&j| data.partition.group(j).iter().copied())
        .collect();
    let mut w = vec![0.0; p];
    if cols.is_empty() {
        return Ok(w.into());
    }
    let xs = data.train.x().select_columns(&cols)?;
    let rhs = xs.transpose_matvec(data.train.y()?)?;
    let coef = cholesky_solve(&xs.gram(), &rhs)?;
    for (&c, v) in cols.iter().zip(coef.iter()) {
        w[c] = *v;
    }
    Ok(w.into())
}

fn diverged_record(method: Method, depth: Option<usize>, lambda: f64, p: usize) -> PathRecord {
    PathRecord {
        lambda,
        depth,
        method,
        train_objective: f64::NAN,
        test_rmse: f64::NAN,
        active_group_count: 0,
        support: Vec::new(),
        misalignment: f64::NAN,
        diverged: true,
        weights: DenseVector::zeros(p),
        params: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    data: &GroupSparseData,
    method: Method,
    depth: Option<usize>,
    lambda: f64,
    scale: f64,
    w: DenseVector,
    eps: f64,
    misalignment: f64,
    params: Option<GatedParams>,
) -> Result<PathRecord> {
    let train_objective = match depth {
        Some(d) => penalized_objective(&data.train, &data.partition, &w, lambda * scale, d)?,
        None => squared_loss(&data.train, &w)?,
    } / scale;
    let support = data.partition.active_groups(&w, eps)?;
    Ok(PathRecord {
        lambda,
        depth,
        method,
        train_objective,
        test_rmse: rmse(&data.test, &w)?,
        active_group_count: support.len(),
        support,
        misalignment,
        diverged: false,
        weights: w,
        params,
    })
}

/// Runs every `(method, depth, lambda)` job of `spec` on one dataset.
///
/// Job `k` trains from its own `N(0, 1/p)` start and shuffling seed, both
/// derived from `seed ^ k`. Records come back in job order whatever `jobs` is.
pub fn run_path(data: &GroupSparseData, spec: &PathSpec, seed: u64, jobs: usize) -> Result<Vec<PathRecord>> {
    spec.validate()?;
    let partition = data.partition.clone();
    let p = partition.p();
    if data.train.n_features() != p {
        return Err(Error::config("dataset and partition sizes differ"));
    }
    let model = LinearModel::new(partition.clone());
    let fista = if spec.methods.contains(&Method::Fista) {
        Some(FistaSolver::new(&data.train, &partition)?)
    } else {
        None
    };
    let oracle = if spec.methods.contains(&Method::OracleLs) {
        Some(oracle_weights(data)?)
    } else {
        None
    };
    let eps = spec.train.eps_tiny;
    let scale = if spec.mean_loss { data.train.n() as f64 } else { 1.0 };
    let list = spec.jobs();
    let results = map_indexed(list.len(), jobs, |k| -> Result<PathRecord> {
        let (method, depth, lambda) = list[k];
        let job_seed = seed ^ k as u64;
        let finish = |w, eps, mis, params| finish(data, method, depth, lambda, scale, w, eps, mis, params);
        let config = TrainConfig {
            lambda: lambda * scale,
            depth: depth.unwrap_or(2),
            seed: job_seed,
            ..spec.train.clone()
        };
        match method {
            Method::Dgating => {
                let omega = init_omega(p, &mut Rng::seed_from_u64(job_seed));
                match sgd_train(&model, &data.train, &config, &omega, &[], 0) {
                    Ok(out) => {
                        let w = out.effective(eps);
                        let mis = out.params.misalignment();
                        finish(w, eps, mis, Some(out.params))
                    }
                    Err(CoreError::Diverged { .. }) => Ok(diverged_record(method, depth, lambda, p)),
                    Err(e) => Err(e.into()),
                }
            }
            Method::Subgrad => {
                let w0 = init_omega(p, &mut Rng::seed_from_u64(job_seed));
                match subgrad_direct(&model, &data.train, &config, &w0, &[], 0) {
                    Ok(out) => finish(out.w, eps, 0.0, None),
                    Err(CoreError::Diverged { .. }) => Ok(diverged_record(method, depth, lambda, p)),
                    Err(e) => Err(e.into()),
                }
            }
            Method::Fista => {
                let solver = fista.as_ref().expect("solver built when fista is requested");
                let out = solver.solve(lambda * scale, None, spec.fista.iters, spec.fista.tol)?;
                finish(out.w, 0.0, 0.0, None)
            }
            Method::OracleLs => {
                let w = oracle.clone().expect("oracle fitted when requested");
                finish(w, 0.0, 0.0, None)
            }
        }
    });
    results.into_iter().collect()
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-grid-point summary across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: Method,
    pub depth: Option<usize>,
    pub lambda: f64,
    pub runs: usize,
    pub diverged: usize,
    pub train_objective_mean: f64,
    pub train_objective_sd: f64,
    pub test_rmse_mean: f64,
    pub test_rmse_sd: f64,
    pub active_groups_mean: f64,
    pub active_groups_sd: f64,
    pub misalignment_mean: f64,
    pub misalignment_sd: f64,
}

/// Groups records from several seeds by `(method, depth, lambda)`; diverged
/// runs are counted but left out of the means.
pub fn aggregate(runs: &[Vec<PathRecord>]) -> Vec<AggregateRow> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let mut rows = Vec::with_capacity(first.len());
    for (k, proto) in first.iter().enumerate() {
        let points: Vec<&PathRecord> = runs.iter().filter_map(|r| r.get(k)).collect();
        let ok: Vec<&&PathRecord> = points.iter().filter(|r| !r.diverged).collect();
        let stat = |f: &dyn Fn(&PathRecord) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (to_m, to_s) = stat(&|r| r.train_objective);
        let (rm_m, rm_s) = stat(&|r| r.test_rmse);
        let (ag_m, ag_s) = stat(&|r| r.active_group_count as f64);
        let (mi_m, mi_s) = stat(&|r| r.misalignment);
        rows.push(AggregateRow {
            method: proto.method,
            depth: proto.depth,
            lambda: proto.lambda,
            runs: points.len(),
            diverged: points.len() - ok.len(),
            train_objective_mean: to_m,
            train_objective_sd: to_s,
            test_rmse_mean: rm_m,
            test_rmse_sd: rm_s,
            active_groups_mean: ag_m,
            active_groups_sd: ag_s,
            misalignment_mean: mi_m,
            misalignment_sd: mi_s,
        });
    }
    rows
}
