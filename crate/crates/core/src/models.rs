//! Unregularized losses `L0` over effective weights.
//!
//! All losses are sums over samples (not means), so a batch that repeats
//! every sample doubles both the loss and its gradients.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::gating::{add_penalty_subgradient, nonsmooth_penalty};
use crate::grouping::GroupPartition;
use crate::numerics::{dot_unchecked, DenseMatrix, DenseVector, Rng};

/// Regression values or class labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(DenseVector),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.len(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples `x_i` (rows of `x`) with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DenseMatrix,
    targets: Targets,
}

impl Dataset {
    pub fn new(x: DenseMatrix, targets: Targets) -> Result<Self> {
        if x.rows() == 0 {
            return Err(invalid("dataset needs at least one sample"));
        }
        check_len("Dataset::new", x.rows(), targets.len())?;
        Ok(Self { x, targets })
    }

    pub fn regression(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        Self::new(x, Targets::Real(y.into()))
    }

    pub fn classification(x: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(x, Targets::Labels(labels))
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Regression targets, or an error for labelled data.
    pub fn y(&self) -> Result<&DenseVector> {
        match &self.targets {
            Targets::Real(y) => Ok(y),
            Targets::Labels(_) => Err(invalid("dataset has class labels, not real targets")),
        }
    }

    fn check_batch(&self, batch: Option<&[usize]>) -> Result<()> {
        if let Some(b) = batch {
            if let Some(&bad) = b.iter().find(|&&i| i >= self.n()) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    len: self.n(),
                });
            }
        }
        Ok(())
    }
}

/// Loss value with gradients for the gated block `w` and ungated block `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_w: DenseVector,
    pub grad_v: DenseVector,
}

/// A differentiable loss whose penalized weights are grouped.
///
/// Implementations are reentrant: evaluation only reads `self` and `data`.
pub trait GroupedModel {
    /// Partition of the penalized (gated) block `w`.
    fn partition(&self) -> &Arc<GroupPartition>;

    /// Length of the ungated block `v`.
    fn ungated_len(&self) -> usize {
        0
    }

    /// Summed loss over `batch` (all samples when `None`) and its gradients.
    fn loss_grad(
        &self,
        data: &Dataset,
        w: &[f64],
        v: &[f64],
        batch: Option<&[usize]>,
    ) -> Result<Evaluation>;

    fn loss(&self, data: &Dataset, w: &[f64], v: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        Ok(self.loss_grad(data, w, v, batch)?.loss)
    }
}

/// Grouped least squares without intercept: `L0 = sum_i (y_i - x_i^T w)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    partition: Arc<GroupPartition>,
}

impl LinearModel {
    pub fn new(partition: Arc<GroupPartition>) -> Self {
        Self { partition }
    }
}

impl GroupedModel for LinearModel {
    fn partition(&self) -> &Arc<GroupPartition> {
        &self.partition
    }

    fn loss_grad(
        &self,
        data: &Dataset,
        w: &[f64],
        v: &[f64],
        batch: Option<&[usize]>,
    ) -> Result<Evaluation> {
        check_len("linear_loss_grad (w)", self.partition.p(), w.len())?;
        check_len("linear_loss_grad (features)", self.partition.p(), data.n_features())?;
        check_len("linear_loss_grad (v)", 0, v.len())?;
        data.check_batch(batch)?;
        let y = data.y()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        let mut visit = |i: usize| {
            let row = data.x.row(i);
            let r = y[i] - dot_unchecked(row, w);
            loss += r * r;
            let s = -2.0 * r;
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += s * x;
            }
        };
        match batch {
            Some(b) => b.iter().for_each(|&i| visit(i)),
            None => (0..data.n()).for_each(visit),
        }
        Ok(Evaluation {
            loss,
            grad_w: grad.into(),
            grad_v: DenseVector::zeros(0),
        })
    }
}

/// Which first-layer weights form a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum MlpGrouping {
    /// One group per hidden neuron (row of the first-layer matrix).
    NeuronWise,
    /// One group per input feature (column of the first-layer matrix).
    InputWise,
}

/// Two-hidden-layer rectifier network `in -> h1 -> h2 -> out`.
///
/// The first-layer matrix (`h1 x in`, row-major) is the gated block `w`.
/// The ungated block `v` is laid out as `[b1, W2, b2, W3, b3]` with row-major
/// matrices. Labelled data uses softmax cross-entropy; real targets need
/// `out == 1` and use squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    sizes: [usize; 4],
    grouping: MlpGrouping,
    partition: Arc<GroupPartition>,
}

impl MlpModel {
    pub fn new(sizes: [usize; 4], grouping: MlpGrouping) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(invalid("layer sizes must be positive"));
        }
        let [n_in, h1, _, _] = sizes;
        let partition = match grouping {
            MlpGrouping::NeuronWise => GroupPartition::contiguous(&vec![n_in; h1])?,
            MlpGrouping::InputWise => GroupPartition::from_groups(
                (0..n_in)
                    .map(|c| (0..h1).map(|r| r * n_in + c).collect())
                    .collect(),
            )?,
        };
        Ok(Self {
            sizes,
            grouping,
            partition: Arc::new(partition),
        })
    }

    pub fn sizes(&self) -> [usize; 4] {
        self.sizes
    }

    pub fn grouping(&self) -> MlpGrouping {
        self.grouping
    }

    pub fn gated_len(&self) -> usize {
        self.sizes[0] * self.sizes[1]
    }

    /// Fan-in scaled normal weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(&self, rng: &mut Rng) -> (DenseVector, DenseVector) {
        let [n_in, h1, h2, out] = self.sizes;
        let kaiming = |rng: &mut Rng, fan_in: usize, count: usize| -> Vec<f64> {
            let sd = libm::sqrt(2.0 / fan_in as f64);
            (0..count).map(|_| sd * rng.gauss()).collect()
        };
        let w = kaiming(rng, n_in, h1 * n_in);
        let mut v = Vec::with_capacity(self.ungated_len());
        v.extend(core::iter::repeat_n(0.0, h1));
        v.extend(kaiming(rng, h1, h2 * h1));
        v.extend(core::iter::repeat_n(0.0, h2));
        v.extend(kaiming(rng, h2, out * h2));
        v.extend(core::iter::repeat_n(0.0, out));
        (w.into(), v.into())
    }

    fn offsets(&self) -> [usize; 5] {
        let [_, h1, h2, out] = self.sizes;
        let b1 = 0;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + out * h2;
        [b1, w2, b2, w3, b3]
    }

    /// Network outputs (logits) for one input row.
    pub fn forward(&self, x: &[f64], w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp forward (input)", self.sizes[0], x.len())?;
        check_len("mlp forward (w)", self.gated_len(), w.len())?;
        check_len("mlp forward (v)", self.ungated_len(), v.len())?;
        Ok(self.activations(x, w, v).z3)
    }

    fn activations(&self, x: &[f64], w: &[f64], v: &[f64]) -> Activations {
        let [n_in, h1, h2, out] = self.sizes;
        let [ob1, ow2, ob2, ow3, ob3] = self.offsets();
        let z1: Vec<f64> = (0..h1)
            .map(|r| dot_unchecked(&w[r * n_in..(r + 1) * n_in], x) + v[ob1 + r])
            .collect();
        let a1: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
        let z2: Vec<f64> = (0..h2)
            .map(|r| dot_unchecked(&v[ow2 + r * h1..ow2 + (r + 1) * h1], &a1) + v[ob2 + r])
            .collect();
        let a2: Vec<f64> = z2.iter().map(|&z| relu(z)).collect();
        let z3: Vec<f64> = (0..out)
            .map(|r| dot_unchecked(&v[ow3 + r * h2..ow3 + (r + 1) * h2], &a2) + v[ob3 + r])
            .collect();
        Activations { z1, a1, z2, a2, z3 }
    }
}

struct Activations {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    z3: Vec<f64>,
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

impl GroupedModel for MlpModel {
    fn partition(&self) -> &Arc<GroupPartition> {
        &self.partition
    }

    fn ungated_len(&self) -> usize {
        let [_, h1, h2, out] = self.sizes;
        h1 + h2 * h1 + h2 + out * h2 + out
    }

    fn loss_grad(
        &self,
        data: &Dataset,
        w: &[f64],
        v: &[f64],
        batch: Option<&[usize]>,
    ) -> Result<Evaluation> {
        let [n_in, h1, h2, out] = self.sizes;
        check_len("mlp_loss_grad (w)", self.gated_len(), w.len())?;
        check_len("mlp_loss_grad (v)", self.ungated_len(), v.len())?;
        check_len("mlp_loss_grad (features)", n_in, data.n_features())?;
        data.check_batch(batch)?;
        match &data.targets {
            Targets::Real(_) if out != 1 => {
                return Err(invalid("real targets need a single network output"))
            }
            Targets::Labels(l) => {
                if let Some(&bad) = l.iter().find(|&&c| c >= out) {
                    return Err(Error::IndexOutOfRange { index: bad, len: out });
                }
            }
            _ => {}
        }
        let [ob1, ow2, ob2, ow3, ob3] = self.offsets();
        let mut gw = vec![0.0; w.len()];
        let mut gv = vec![0.0; v.len()];
        let mut loss = 0.0;
        let mut dz3 = vec![0.0; out];
        let mut dz2 = vec![0.0; h2];
        let mut dz1 = vec![0.0; h1];

        let mut visit = |i: usize| {
            let x = data.x.row(i);
            let act = self.activations(x, w, v);
            match &data.targets {
                Targets::Labels(l) => {
                    let m = act.z3.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = act.z3.iter().map(|&z| libm::exp(z - m)).sum();
                    let lse = m + libm::log(sum);
                    loss += lse - act.z3[l[i]];
                    for (k, d) in dz3.iter_mut().enumerate() {
                        *d = libm::exp(act.z3[k] - lse);
                    }
                    dz3[l[i]] -= 1.0;
                }
                Targets::Real(y) => {
                    let r = act.z3[0] - y[i];
                    loss += r * r;
                    dz3[0] = 2.0 * r;
                }
            }
            for k in 0..out {
                gv[ob3 + k] += dz3[k];
                let row = &mut gv[ow3 + k * h2..ow3 + (k + 1) * h2];
                for (g, &a) in row.iter_mut().zip(&act.a2) {
                    *g += dz3[k] * a;
                }
            }
            for r in 0..h2 {
                dz2[r] = if act.z2[r] > 0.0 {
                    (0..out).map(|k| v[ow3 + k * h2 + r] * dz3[k]).sum()
                } else {
                    0.0
                };
            }
            for r in 0..h2 {
                gv[ob2 + r] += dz2[r];
                let row = &mut gv[ow2 + r * h1..ow2 + (r + 1) * h1];
                for (g, &a) in row.iter_mut().zip(&act.a1) {
                    *g += dz2[r] * a;
                }
            }
            for c in 0..h1 {
                dz1[c] = if act.z1[c] > 0.0 {
                    (0..h2).map(|r| v[ow2 + r * h1 + c] * dz2[r]).sum()
                } else {
                    0.0
                };
            }
            for c in 0..h1 {
                gv[ob1 + c] += dz1[c];
                let row = &mut gw[c * n_in..(c + 1) * n_in];
                for (g, &xv) in row.iter_mut().zip(x) {
                    *g += dz1[c] * xv;
                }
            }
        };
        match batch {
            Some(b) => b.iter().for_each(|&i| visit(i)),
            None => (0..data.n()).for_each(&mut visit),
        }
        Ok(Evaluation {
            loss,
            grad_w: gw.into(),
            grad_v: gv.into(),
        })
    }
}

/// Two-feature objective `(y - x1 w1 - x2 w2)^2 + lambda ||w||_2^{2/D}`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyObjective {
    pub x1: f64,
    pub x2: f64,
    pub y: f64,
    pub depth: usize,
    pub lambda: f64,
}

/// Floor for `||w||` in the toy penalty gradient.
const TOY_NORM_FLOOR: f64 = 1e-300;

impl ToyObjective {
    /// Value and (sub)gradient. At `w = 0` the penalty contributes 0;
    /// elsewhere its gradient is `lambda (2/D) ||w||^{2/D - 2} w`.
    pub fn loss_grad(&self, w: [f64; 2]) -> (f64, [f64; 2]) {
        let r = self.y - self.x1 * w[0] - self.x2 * w[1];
        let norm = libm::sqrt(w[0] * w[0] + w[1] * w[1]);
        let d = self.depth as f64;
        let penalty = if norm > 0.0 { libm::pow(norm, 2.0 / d) } else { 0.0 };
        let loss = r * r + self.lambda * penalty;
        let mut grad = [-2.0 * r * self.x1, -2.0 * r * self.x2];
        if norm > 0.0 {
            let s = self.lambda * (2.0 / d) * libm::pow(norm.max(TOY_NORM_FLOOR), 2.0 / d - 2.0);
            grad[0] += s * w[0];
            grad[1] += s * w[1];
        }
        (loss, grad)
    }

    /// The data term as a one-sample, one-group linear problem.
    pub fn as_linear(&self) -> (LinearModel, Dataset) {
        let partition = Arc::new(GroupPartition::contiguous(&[2]).expect("static partition"));
        let x = DenseMatrix::from_rows(&[[self.x1, self.x2]]).expect("static shape");
        let data = Dataset::regression(x, vec![self.y]).expect("one sample");
        (LinearModel::new(partition), data)
    }

    /// Same value as [`ToyObjective::loss_grad`], assembled from the linear
    /// data term and the group penalty.
    pub fn loss_via_linear(&self, w: [f64; 2]) -> Result<(f64, [f64; 2])> {
        let (model, data) = self.as_linear();
        let ev = model.loss_grad(&data, &w, &[], None)?;
        let pen = nonsmooth_penalty(&w, model.partition(), self.depth)?;
        let mut g = ev.grad_w.into_vec();
        add_penalty_subgradient(&w, model.partition(), self.depth, self.lambda, &mut g);
        Ok((ev.loss + self.lambda * pen, [g[0], g[1]]))
    }
}
