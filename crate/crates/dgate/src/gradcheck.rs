//! Central finite-difference checks of the gated gradients.

use std::fmt;
use std::sync::Arc;

use dgate_core::gating::gated_objective;
use dgate_core::{
    Dataset, DenseMatrix, DenseVector, GatedParams, GroupedModel, LinearModel, MlpGrouping, MlpModel, Rng,
    ToyObjective,
};
use serde::{Deserialize, Serialize};

use crate::data::{generate_blobs, generate_group_sparse, ClassBlobs, GroupSparseDgp};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub depths: Vec<usize>,
    pub lambda: f64,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Negates the penalty term of the analytic gradient. Only useful to
    /// confirm that the check catches a wiring fault.
    #[serde(skip)]
    pub flip_penalty_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            depths: vec![2, 3, 4],
            lambda: 0.3,
            eps: 1e-6,
            tol: 1e-5,
            seed: 0,
            flip_penalty_sign: false,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.iter().any(|&d| d < 2) {
            return Err(Error::config("depths must be nonempty and at least 2"));
        }
        if !(self.eps > 0.0 && self.tol > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("eps and tol must be positive, lambda finite"));
        }
        Ok(())
    }
}

/// Worst coordinate of one (model, D) check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub model: String,
    pub depth: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl fmt::Display for GradcheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} D={} coords={:<5} max_rel_err={:.3e} at {}",
            self.model, self.depth, self.coords, self.max_rel_err, self.worst
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }
}

/// `|a - f| / max(1, |a|, |f|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff.is_nan() {
        return f64::INFINITY;
    }
    diff / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Runs every model at every configured depth.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);

    let linear_data = generate_group_sparse(&GroupSparseDgp {
        n_train: 30,
        n_test: 1,
        n_groups: 6,
        group_size: 3,
        n_informative: 2,
        seed: cfg.seed,
        ..Default::default()
    })?;
    let linear = LinearModel::new(Arc::clone(&linear_data.partition));

    let blobs = generate_blobs(&ClassBlobs {
        n: 20,
        n_features: 8,
        seed: cfg.seed,
        ..Default::default()
    })?;
    let mlp_neuron = MlpModel::new([8, 16, 8, 3], MlpGrouping::NeuronWise)?;
    let mlp_input = MlpModel::new([8, 16, 8, 3], MlpGrouping::InputWise)?;

    let toy = ToyObjective {
        x1: 1.0,
        x2: 0.5,
        y: 0.2,
        depth: 2,
        lambda: cfg.lambda,
    };
    let (toy_model, toy_data) = toy.as_linear();

    let mut entries = Vec::new();
    for &depth in &cfg.depths {
        entries.push(check_gated("linear", &linear, &linear_data.train, depth, &[], cfg, &mut rng)?);
        for (name, model) in [("mlp-neuron", &mlp_neuron), ("mlp-input", &mlp_input)] {
            let (_, v) = model.init(&mut rng);
            entries.push(check_gated(name, model, &blobs, depth, &v, cfg, &mut rng)?);
        }
        entries.push(check_gated("toy-gated", &toy_model, &toy_data, depth, &[], cfg, &mut rng)?);
        entries.push(check_toy_direct(&ToyObjective { depth, ..toy }, cfg, &mut rng));
    }
    Ok(GradcheckReport { entries, tol: cfg.tol })
}

/// Compares the chain-rule gradient of `L0(collapse) + lambda * surrogate`
/// (and the ungated block) with central differences at a random point.
fn check_gated<M: GroupedModel + ?Sized>(
    name: &str,
    model: &M,
    data: &Dataset,
    depth: usize,
    v: &[f64],
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<GradcheckEntry> {
    let partition = Arc::clone(model.partition());
    let p = partition.p();
    let omega: DenseVector = (0..p).map(|_| rng.gauss()).collect();
    let gates: Vec<f64> = (0..partition.len() * (depth - 1))
        .map(|_| (0.5 + rng.uniform()) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    let gamma = DenseMatrix::new(partition.len(), depth - 1, gates)?;
    let params = GatedParams::new(omega, gamma, depth, partition)?;

    let lambda_used = if cfg.flip_penalty_sign { -cfg.lambda } else { cfg.lambda };
    let ev = model.loss_grad(data, &params.collapse(), v, None)?;
    let grad = params.grads_from_effective(&ev.grad_w, lambda_used)?;
    let n_gated = params.n_params();
    let mut analytic = vec![0.0; n_gated + v.len()];
    grad.write_flat(&mut analytic[..n_gated]);
    analytic[n_gated..].copy_from_slice(&ev.grad_v);

    let mut x = vec![0.0; n_gated + v.len()];
    params.write_flat(&mut x[..n_gated]);
    x[n_gated..].copy_from_slice(v);

    let mut work = params.clone();
    let mut objective = |x: &[f64]| -> Result<f64> {
        work.read_flat(&x[..n_gated]);
        let loss = model.loss(data, &work.collapse(), &x[n_gated..], None)?;
        Ok(gated_objective(loss, &work, cfg.lambda))
    };

    let p_omega = params.omega().len();
    let gamma_cols = depth - 1;
    let label = |i: usize| {
        if i < p_omega {
            format!("omega[{i}]")
        } else if i < n_gated {
            let k = i - p_omega;
            format!("gamma[{},{}]", k / gamma_cols, k % gamma_cols)
        } else {
            format!("v[{}]", i - n_gated)
        }
    };

    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + cfg.eps;
        let up = objective(&x)?;
        x[i] = x0 - cfg.eps;
        let down = objective(&x)?;
        x[i] = x0;
        let err = rel_err(analytic[i], (up - down) / (2.0 * cfg.eps));
        if err > worst.0 || (err.is_infinite() && worst.0 == 0.0) {
            worst = (err, i);
        }
    }
    Ok(GradcheckEntry {
        model: name.to_string(),
        depth,
        coords: x.len(),
        max_rel_err: worst.0,
        worst: label(worst.1),
    })
}

/// The direct objective's gradient away from the origin.
fn check_toy_direct(obj: &ToyObjective, cfg: &GradcheckConfig, rng: &mut Rng) -> GradcheckEntry {
    let w = [0.5 + rng.uniform(), -0.5 - rng.uniform()];
    let flipped = ToyObjective {
        lambda: if cfg.flip_penalty_sign { -obj.lambda } else { obj.lambda },
        ..*obj
    };
    let (_, g) = flipped.loss_grad(w);
    let mut worst = (0.0, 0);
    for i in 0..2 {
        let mut up = w;
        let mut down = w;
        up[i] += cfg.eps;
        down[i] -= cfg.eps;
        let fd = (obj.loss_grad(up).0 - obj.loss_grad(down).0) / (2.0 * cfg.eps);
        let err = rel_err(g[i], fd);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    GradcheckEntry {
        model: "toy-direct".to_string(),
        depth: obj.depth,
        coords: 2,
        max_rel_err: worst.0,
        worst: format!("w[{}]", worst.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert_eq!(report.entries.len(), 15);
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = GradcheckConfig {
            flip_penalty_sign: true,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 1e-3);
    }

    #[test]
    fn coarse_step_needs_a_looser_tolerance() {
        let fine = run_gradcheck(&GradcheckConfig::default()).unwrap().max_rel_err();
        let coarse = GradcheckConfig {
            eps: 1e-3,
            tol: 1e-1,
            ..Default::default()
        };
        let report = run_gradcheck(&coarse).unwrap();
        assert!(report.max_rel_err() > fine, "{fine} {:?}", report.worst());
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn rel_err_scale() {
        assert_eq!(rel_err(1e-8, 2e-8), 1e-8);
        assert_eq!(rel_err(100.0, 101.0), 1.0 / 101.0);
        assert!(rel_err(f64::NAN, 0.0).is_infinite());
    }
}
