//! Imbalance and loss-gap decay across depths and penalty strengths.

use std::fmt;

use dgate_core::optim::{flow_integrate, sgd_train, LrSchedule, TraceRecord, TrainConfig};
use dgate_core::{Dataset, DenseVector, GatedParams, GroupedModel, LinearModel, MlpGrouping, MlpModel, Rng};
use serde::{Deserialize, Serialize};

use super::init_omega;
use crate::data::{generate_blobs, generate_group_sparse, ClassBlobs, GroupSparseDgp};
use crate::error::{Error, Result};
use crate::fit::{fit_log_slope, linear_fit, FitWindow};
use crate::parallel::map_indexed;

/// Relative `I_max` drift below which a `lambda = 0` run counts as conserving.
pub const CONSERVATION_TOL: f64 = 1e-6;
/// Relative slope error allowed for flow runs.
pub const FLOW_SLOPE_TOL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Sgd,
    Flow,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Sgd => "sgd",
            Engine::Flow => "flow",
        })
    }
}

/// Model and data for a decay study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecayModel {
    /// Grouped least squares on group-sparse regression data.
    Linear { dgp: GroupSparseDgp },
    /// Rectifier MLP on Gaussian class clusters.
    Mlp {
        sizes: [usize; 4],
        grouping: MlpGrouping,
        blobs: ClassBlobs,
    },
}

impl DecayModel {
    pub fn linear_default() -> Self {
        DecayModel::Linear {
            dgp: GroupSparseDgp {
                n_train: 100,
                n_test: 1,
                n_groups: 10,
                group_size: 4,
                n_informative: 3,
                noise_sd: 0.5,
                feature_sd: 0.1,
                ..Default::default()
            },
        }
    }

    pub fn mlp_default() -> Self {
        DecayModel::Mlp {
            sizes: [20, 32, 16, 3],
            grouping: MlpGrouping::NeuronWise,
            blobs: ClassBlobs::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayModel::Linear { .. } => "linear",
            DecayModel::Mlp { .. } => "mlp",
        }
    }
}

enum Built {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl Built {
    fn as_model(&self) -> &(dyn GroupedModel + Sync) {
        match self {
            Built::Linear(m) => m,
            Built::Mlp(m) => m,
        }
    }
}

/// Builds the model and dataset and draws the shared starting point
/// `(omega, v)` from `seed`.
fn build(spec: &DecayModel, seed: u64) -> Result<(Built, Dataset, DenseVector, DenseVector)> {
    let mut rng = Rng::seed_from_u64(seed);
    match spec {
        DecayModel::Linear { dgp } => {
            let data = generate_group_sparse(&GroupSparseDgp {
                seed: dgp.seed ^ seed,
                ..dgp.clone()
            })?;
            let train = data.train;
            let omega = init_omega(data.partition.p(), &mut rng);
            Ok((Built::Linear(LinearModel::new(data.partition)), train, omega, DenseVector::zeros(0)))
        }
        DecayModel::Mlp { sizes, grouping, blobs } => {
            if blobs.n_features != sizes[0] || blobs.n_classes != sizes[3] {
                return Err(Error::config("blob features/classes must match the MLP input/output sizes"));
            }
            let data = generate_blobs(&ClassBlobs {
                seed: blobs.seed ^ seed,
                ..blobs.clone()
            })?;
            let model = MlpModel::new(*sizes, *grouping)?;
            let (w, v) = model.init(&mut rng);
            Ok((Built::Mlp(model), data, w, v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub t_end: f64,
    pub dt: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self { t_end: 20.0, dt: 2e-3 }
    }
}

/// What to run. For the SGD engine `sgd.lambda`, `sgd.depth` are set per
/// configuration and the trace time axis is `step * lr_0 / |B|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySpec {
    pub model: DecayModel,
    pub depths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub engine: Engine,
    pub flow: FlowSettings,
    pub sgd: TrainConfig,
    pub trace_every: usize,
    pub fit: FitWindow,
}

impl Default for DecaySpec {
    fn default() -> Self {
        Self {
            model: DecayModel::linear_default(),
            depths: vec![2, 3, 4],
            lambdas: vec![0.01, 0.1, 1.0],
            engine: Engine::Flow,
            flow: FlowSettings::default(),
            sgd: TrainConfig {
                iters: 2000,
                lr_schedule: LrSchedule::Constant { lr: 1e-2 },
                momentum: 0.0,
                ..TrainConfig::default()
            },
            trace_every: 1,
            fit: FitWindow::default(),
        }
    }
}

impl DecaySpec {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.lambdas.is_empty() {
            return Err(Error::config("depth and lambda grids must be nonempty"));
        }
        if self.depths.iter().any(|&d| d < 2) {
            return Err(Error::config("depths must be at least 2"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda values must be finite and nonnegative"));
        }
        match self.engine {
            Engine::Flow => {
                if !(self.flow.dt > 0.0 && self.flow.t_end >= self.flow.dt) {
                    return Err(Error::config("flow needs dt > 0 and t_end >= dt"));
                }
            }
            Engine::Sgd => TrainConfig {
                depth: 2,
                ..self.sgd.clone()
            }
            .validate()?,
        }
        Ok(())
    }

    /// `(depth, lambda)` pairs in run order.
    pub fn configs(&self) -> Vec<(usize, f64)> {
        self.depths
            .iter()
            .flat_map(|&d| self.lambdas.iter().map(move |&l| (d, l)))
            .collect()
    }
}

/// One `(depth, lambda)` trajectory and its fitted rates.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayRun {
    pub depth: usize,
    pub lambda: f64,
    pub trace: Vec<TraceRecord>,
    /// Fitted slope of `ln I_max(t)`.
    pub slope_imax: Option<f64>,
    /// Fitted slope of `ln(lambda * misalignment)`, the loss gap.
    pub slope_gap: Option<f64>,
    /// `max_t |I_max(t) - I_max(0)| / I_max(0)`.
    pub imax_drift: f64,
}

impl DecayRun {
    /// `-4 lambda / D`.
    pub fn theory(&self) -> f64 {
        -4.0 * self.lambda / self.depth as f64
    }

    /// Relative error of the `I_max` slope against [`DecayRun::theory`];
    /// `None` for `lambda = 0` or when no slope could be fitted.
    pub fn rel_err(&self) -> Option<f64> {
        let th = self.theory();
        if th == 0.0 {
            return None;
        }
        self.slope_imax.map(|s| ((s - th) / th).abs())
    }

    pub fn conserved(&self) -> bool {
        self.imax_drift < CONSERVATION_TOL
    }

    /// Flow runs must match the closed-form rate (or conserve at `lambda = 0`).
    pub fn within_tol(&self) -> bool {
        if self.lambda == 0.0 {
            self.conserved()
        } else {
            self.rel_err().is_some_and(|e| e < FLOW_SLOPE_TOL)
        }
    }
}

fn summarize(depth: usize, lambda: f64, trace: Vec<TraceRecord>, fit: &FitWindow) -> DecayRun {
    let t: Vec<f64> = trace.iter().map(|r| r.t).collect();
    let imax: Vec<f64> = trace.iter().map(|r| r.imbalance_max).collect();
    let gap: Vec<f64> = trace.iter().map(|r| lambda * r.misalignment).collect();
    let i0 = imax.first().copied().unwrap_or(0.0);
    let imax_drift = if i0 > 0.0 {
        imax.iter().map(|v| (v - i0).abs()).fold(0.0, f64::max) / i0
    } else {
        0.0
    };
    let slope_imax = if lambda == 0.0 {
        // constant up to roundoff; fit without the decay window floor
        linear_fit(&t, &imax.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect::<Vec<_>>())
            .map(|(s, _)| s)
    } else {
        fit_log_slope(&t, &imax, fit)
    };
    let slope_gap = if lambda > 0.0 { fit_log_slope(&t, &gap, fit) } else { None };
    DecayRun {
        depth,
        lambda,
        trace,
        slope_imax,
        slope_gap,
        imax_drift,
    }
}

/// Runs every `(depth, lambda)` configuration from one shared starting
/// point (gates at one). Results come back in [`DecaySpec::configs`] order.
pub fn run_decay(spec: &DecaySpec, seed: u64, jobs: usize) -> Result<Vec<DecayRun>> {
    spec.validate()?;
    let (built, data, omega, v) = build(&spec.model, seed)?;
    let model = built.as_model();
    let configs = spec.configs();
    let runs = map_indexed(configs.len(), jobs, |k| -> Result<DecayRun> {
        let (depth, lambda) = configs[k];
        let trace = match spec.engine {
            Engine::Flow => {
                let init = GatedParams::with_unit_gates(omega.clone(), model.partition().clone(), depth)?;
                flow_integrate(model, &data, lambda, &init, &v, spec.flow.t_end, spec.flow.dt)?.trace
            }
            Engine::Sgd => {
                let cfg = TrainConfig {
                    lambda,
                    depth,
                    ..spec.sgd.clone()
                };
                let batch = cfg.batch_size.min(data.n()) as f64;
                let scale = cfg.lr_schedule.initial() / batch;
                let mut trace = sgd_train(model, &data, &cfg, &omega, &v, spec.trace_every)?.trace;
                trace.iter_mut().for_each(|r| r.t *= scale);
                trace
            }
        };
        Ok(summarize(depth, lambda, trace, &spec.fit))
    });
    runs.into_iter().collect()
}
