//! Gated decomposition of grouped weights.
//!
//! A group `w_j` is stored as `D` factors: the primary vector `omega_j` and
//! the scalars `gamma_{j,1..D-1}`. Factor indices follow a 1-based
//! convention throughout this module: factor `1` is `omega_j`, factors
//! `2..=D` are `gamma_{j,1}..gamma_{j,D-1}`. The squared factors are
//! `a_1 = ||omega_j||^2` and `a_{d+1} = gamma_{j,d}^2`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::grouping::GroupPartition;
use crate::numerics::{DenseMatrix, DenseVector};

/// Primary weights, gating matrix and depth of a gated parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedParams {
    omega: DenseVector,
    gamma: DenseMatrix,
    depth: usize,
    partition: Arc<GroupPartition>,
}

/// Gradients of the gated objective with respect to `omega` and `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedGradient {
    pub omega: DenseVector,
    pub gamma: DenseMatrix,
}

/// Per-group spread of squared factors plus the global misalignment.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceReport {
    /// `max_d a_d - min_d a_d` per group.
    pub per_group_imbalance_max: DenseVector,
    pub misalignment: f64,
}

impl BalanceReport {
    /// Largest per-group spread, 0 for an empty report.
    pub fn imbalance_max(&self) -> f64 {
        self.per_group_imbalance_max
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }
}

impl GatedParams {
    pub fn new(
        omega: DenseVector,
        gamma: DenseMatrix,
        depth: usize,
        partition: Arc<GroupPartition>,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(invalid("gating depth must be at least 2"));
        }
        check_len("GatedParams::new (omega)", partition.p(), omega.len())?;
        check_len("GatedParams::new (gamma rows)", partition.len(), gamma.rows())?;
        check_len("GatedParams::new (gamma cols)", depth - 1, gamma.cols())?;
        if !omega.is_finite() || !gamma.is_finite() {
            return Err(invalid("gated parameters must be finite"));
        }
        Ok(Self {
            omega,
            gamma,
            depth,
            partition,
        })
    }

    /// `omega` with every gate set to one, the usual starting point.
    pub fn with_unit_gates(
        omega: DenseVector,
        partition: Arc<GroupPartition>,
        depth: usize,
    ) -> Result<Self> {
        let gamma = DenseMatrix::filled(partition.len(), depth.saturating_sub(1), 1.0);
        Self::new(omega, gamma, depth, partition)
    }

    /// Balanced representation of an effective weight.
    ///
    /// Every gate becomes `||w_j||^{1/D}` and `omega_j = w_j / ||w_j||^{(D-1)/D}`,
    /// so all squared factors equal `||w_j||^{2/D}`. Zero groups map to all
    /// zero factors. The positive sign branch is used for every gate.
    pub fn balanced_from_effective(
        w: &[f64],
        partition: Arc<GroupPartition>,
        depth: usize,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(invalid("gating depth must be at least 2"));
        }
        check_len("balanced_from_effective", partition.p(), w.len())?;
        let d = depth as f64;
        let mut omega = DenseVector::zeros(w.len());
        let mut gamma = DenseMatrix::zeros(partition.len(), depth - 1);
        for (j, group) in partition.groups().iter().enumerate() {
            let norm = libm::sqrt(partition.group_norm_sq(j, w));
            if norm == 0.0 {
                continue;
            }
            let r = libm::pow(norm, 1.0 / d);
            gamma.row_mut(j).iter_mut().for_each(|g| *g = r);
            let scale = libm::pow(r, d - 1.0);
            for &i in group {
                omega[i] = w[i] / scale;
            }
        }
        Self::new(omega, gamma, depth, partition)
    }

    pub fn omega(&self) -> &DenseVector {
        &self.omega
    }

    pub fn omega_mut(&mut self) -> &mut DenseVector {
        &mut self.omega
    }

    pub fn gamma(&self) -> &DenseMatrix {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut DenseMatrix {
        &mut self.gamma
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn partition(&self) -> &Arc<GroupPartition> {
        &self.partition
    }

    pub fn is_finite(&self) -> bool {
        self.omega.is_finite() && self.gamma.is_finite()
    }

    /// Number of scalar entries in `omega` and `gamma` together.
    pub fn n_params(&self) -> usize {
        self.omega.len() + self.gamma.as_slice().len()
    }

    /// `prod_d gamma_{j,d}`.
    pub fn gate_product(&self, j: usize) -> f64 {
        self.gamma.row(j).iter().product()
    }

    /// Product of all gates of group `j` except `gamma_{j,skip}` (0-based).
    pub fn gate_product_without(&self, j: usize, skip: usize) -> f64 {
        self.gamma
            .row(j)
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != skip)
            .map(|(_, g)| g)
            .product()
    }

    /// Effective weight `w_j = omega_j * prod_d gamma_{j,d}`.
    pub fn collapse(&self) -> DenseVector {
        let mut w = self.omega.clone();
        for (j, group) in self.partition.groups().iter().enumerate() {
            let s = self.gate_product(j);
            for &i in group {
                w[i] *= s;
            }
        }
        w
    }

    /// Collapses and zeroes groups whose norm is below `eps_tiny`.
    pub fn collapse_pruned(&self, eps_tiny: f64) -> DenseVector {
        let mut w = self.collapse();
        self.partition
            .prune(&mut w, eps_tiny)
            .expect("collapse has partition length");
        w
    }

    /// Squared factors `a_1..a_D` of group `j`.
    pub fn squared_factors(&self, j: usize) -> Vec<f64> {
        let mut a = Vec::with_capacity(self.depth);
        a.push(self.partition.group_norm_sq(j, &self.omega));
        a.extend(self.gamma.row(j).iter().map(|g| g * g));
        a
    }

    /// `(1/D) (||omega||^2 + ||Gamma||_F^2)`; callers multiply by lambda.
    pub fn surrogate_penalty(&self) -> f64 {
        (self.omega.norm_sq() + self.gamma.frobenius_sq()) / self.depth as f64
    }

    /// Gap between the surrogate penalty and the induced group penalty of
    /// the effective weight: `sum_j (mean_d a_d - (prod_d a_d)^{1/D})`.
    ///
    /// Nonnegative by AM-GM and zero exactly at balanced parameters.
    pub fn misalignment(&self) -> f64 {
        (0..self.partition.len())
            .map(|j| group_misalignment(&self.squared_factors(j)))
            .sum()
    }

    /// Signed pair-wise imbalance `a_d - a_{d2}` (1-based factor indices).
    pub fn imbalance(&self, j: usize, d: usize, d2: usize) -> Result<f64> {
        if j >= self.partition.len() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.partition.len(),
            });
        }
        if d == d2 {
            return Err(invalid("imbalance needs two distinct factors"));
        }
        for idx in [d, d2] {
            if idx == 0 || idx > self.depth {
                return Err(invalid(alloc::format!(
                    "factor index {idx} outside 1..={}",
                    self.depth
                )));
            }
        }
        let a = |k: usize| {
            if k == 1 {
                self.partition.group_norm_sq(j, &self.omega)
            } else {
                let g = self.gamma.get(j, k - 2);
                g * g
            }
        };
        Ok(a(d) - a(d2))
    }

    pub fn balance_report(&self) -> BalanceReport {
        let mut per_group = DenseVector::zeros(self.partition.len());
        let mut misalignment = 0.0;
        for j in 0..self.partition.len() {
            let a = self.squared_factors(j);
            let (lo, hi) = a
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            per_group[j] = hi - lo;
            misalignment += group_misalignment(&a);
        }
        BalanceReport {
            per_group_imbalance_max: per_group,
            misalignment,
        }
    }

    /// Chain rule from `grad_w = dL0/dw` (at the collapsed weight) to the
    /// factors, including the `lambda / D` surrogate penalty:
    ///
    /// - `dL/domega_j = (prod_d gamma_{j,d}) grad_w_j + (2 lambda / D) omega_j`
    /// - `dL/dgamma_{j,d} = (prod_{d' != d} gamma_{j,d'}) omega_j . grad_w_j
    ///   + (2 lambda / D) gamma_{j,d}`
    ///
    /// The leave-one-out product is formed directly, never by division, so
    /// zero gates are handled exactly.
    pub fn grads_from_effective(&self, grad_w: &[f64], lambda: f64) -> Result<GatedGradient> {
        check_len("grads_from_effective", self.omega.len(), grad_w.len())?;
        let decay = 2.0 * lambda / self.depth as f64;
        let mut g_omega = DenseVector::zeros(self.omega.len());
        let mut g_gamma = DenseMatrix::zeros(self.gamma.rows(), self.gamma.cols());
        for (j, group) in self.partition.groups().iter().enumerate() {
            let s = self.gate_product(j);
            let mut inner = 0.0;
            for &i in group {
                g_omega[i] = s * grad_w[i] + decay * self.omega[i];
                inner += self.omega[i] * grad_w[i];
            }
            for d in 0..self.gamma.cols() {
                let loo = self.gate_product_without(j, d);
                g_gamma.set(j, d, loo * inner + decay * self.gamma.get(j, d));
            }
        }
        Ok(GatedGradient {
            omega: g_omega,
            gamma: g_gamma,
        })
    }

    /// Writes `omega` then `gamma` (row-major) into `out`.
    pub fn write_flat(&self, out: &mut [f64]) {
        let p = self.omega.len();
        out[..p].copy_from_slice(&self.omega);
        out[p..p + self.gamma.as_slice().len()].copy_from_slice(self.gamma.as_slice());
    }

    /// Inverse of [`GatedParams::write_flat`]; no validation.
    pub fn read_flat(&mut self, src: &[f64]) {
        let p = self.omega.len();
        let q = self.gamma.as_slice().len();
        self.omega.copy_from_slice(&src[..p]);
        self.gamma.as_mut_slice().copy_from_slice(&src[p..p + q]);
    }
}

impl GatedGradient {
    pub fn write_flat(&self, out: &mut [f64]) {
        let p = self.omega.len();
        out[..p].copy_from_slice(&self.omega);
        out[p..p + self.gamma.as_slice().len()].copy_from_slice(self.gamma.as_slice());
    }
}

fn group_misalignment(a: &[f64]) -> f64 {
    let d = a.len() as f64;
    let mean = a.iter().sum::<f64>() / d;
    let prod: f64 = a.iter().product();
    let geo = if prod > 0.0 { libm::pow(prod, 1.0 / d) } else { 0.0 };
    mean - geo
}

/// `sum_j ||w_j||_2^{2/D}`.
pub fn nonsmooth_penalty(w: &[f64], partition: &GroupPartition, depth: usize) -> Result<f64> {
    if depth < 2 {
        return Err(invalid("gating depth must be at least 2"));
    }
    check_len("nonsmooth_penalty", partition.p(), w.len())?;
    let e = 1.0 / depth as f64;
    Ok((0..partition.len())
        .map(|j| {
            let sq = partition.group_norm_sq(j, w);
            if sq > 0.0 {
                libm::pow(sq, e)
            } else {
                0.0
            }
        })
        .sum())
}

/// Gradient of `lambda * sum_j ||w_j||^{2/D}` away from zero groups, and 0
/// on exactly zero groups. Added into `out`.
pub fn add_penalty_subgradient(
    w: &[f64],
    partition: &GroupPartition,
    depth: usize,
    lambda: f64,
    out: &mut [f64],
) {
    let d = depth as f64;
    for (j, group) in partition.groups().iter().enumerate() {
        let sq = partition.group_norm_sq(j, w);
        if sq == 0.0 {
            continue;
        }
        // ||w_j||^{2/D - 2}
        let scale = lambda * (2.0 / d) * libm::pow(sq, 1.0 / d - 1.0);
        for &i in group {
            out[i] += scale * w[i];
        }
    }
}

/// Objective value helper: `L0 + lambda * surrogate`.
pub fn gated_objective(data_loss: f64, params: &GatedParams, lambda: f64) -> f64 {
    data_loss + lambda * params.surrogate_penalty()
}

#[cfg(feature = "serde")]
mod serde_impl {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        depth: usize,
        omega: Vec<f64>,
        gamma: Vec<Vec<f64>>,
        partition: GroupPartition,
    }

    impl Serialize for GatedParams {
        fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
            Repr {
                depth: self.depth,
                omega: self.omega.to_vec(),
                gamma: (0..self.gamma.rows())
                    .map(|j| self.gamma.row(j).to_vec())
                    .collect(),
                partition: (*self.partition).clone(),
            }
            .serialize(s)
        }
    }

    impl<'de> Deserialize<'de> for GatedParams {
        fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
            use serde::de::Error as _;
            let r = Repr::deserialize(d)?;
            let cols = r.depth.saturating_sub(1);
            let gamma = if r.gamma.is_empty() {
                DenseMatrix::zeros(0, cols)
            } else {
                DenseMatrix::from_rows(&r.gamma).map_err(D::Error::custom)?
            };
            GatedParams::new(r.omega.into(), gamma, r.depth, Arc::new(r.partition))
                .map_err(D::Error::custom)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, proptest, Strategy};

    fn part(sizes: &[usize]) -> Arc<GroupPartition> {
        Arc::new(GroupPartition::contiguous(sizes).unwrap())
    }

    fn params(omega: &[f64], gamma: &[&[f64]], depth: usize, sizes: &[usize]) -> GatedParams {
        GatedParams::new(
            omega.to_vec().into(),
            DenseMatrix::from_rows(gamma).unwrap(),
            depth,
            part(sizes),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = part(&[2]);
        assert!(GatedParams::new(DenseVector::zeros(2), DenseMatrix::zeros(1, 1), 1, p.clone()).is_err());
        assert!(GatedParams::new(DenseVector::zeros(3), DenseMatrix::zeros(1, 1), 2, p.clone()).is_err());
        assert!(GatedParams::new(DenseVector::zeros(2), DenseMatrix::zeros(1, 2), 2, p.clone()).is_err());
        assert!(GatedParams::new(vec![f64::NAN, 0.0].into(), DenseMatrix::zeros(1, 1), 2, p).is_err());
    }

    #[test]
    fn collapse_examples() {
        let g = params(&[1.0, 2.0], &[&[2.0, 3.0]], 3, &[2]);
        assert_eq!(g.collapse().as_slice(), &[6.0, 12.0]);

        let omega = vec![0.3, -1.2, 4.0, 0.5, 2.2];
        let unit = GatedParams::with_unit_gates(omega.clone().into(), part(&[2, 3]), 4).unwrap();
        assert_eq!(unit.collapse().as_slice(), omega.as_slice());

        let killed = params(&[5.0, -7.0, 1.0], &[&[0.0, 2.0], &[1.0, 1.0]], 3, &[2, 1]);
        assert_eq!(killed.collapse().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn balanced_examples() {
        let g = GatedParams::balanced_from_effective(&[6.0, 8.0], part(&[2]), 2).unwrap();
        let s10 = libm::sqrt(10.0);
        assert_relative_eq!(g.gamma().get(0, 0), s10, max_relative = 1e-15);
        assert_relative_eq!(g.omega()[0], 6.0 / s10, max_relative = 1e-15);
        assert_relative_eq!(g.omega()[1], 8.0 / s10, max_relative = 1e-15);
        assert_relative_eq!(g.omega().norm_sq(), 10.0, max_relative = 1e-14);

        let g = GatedParams::balanced_from_effective(&[8.0], part(&[1]), 3).unwrap();
        assert_relative_eq!(g.gamma().get(0, 0), 2.0, max_relative = 1e-15);
        assert_relative_eq!(g.gamma().get(0, 1), 2.0, max_relative = 1e-15);
        assert_relative_eq!(g.omega()[0], 2.0, max_relative = 1e-15);
        for a in g.squared_factors(0) {
            assert_relative_eq!(a, libm::pow(8.0, 2.0 / 3.0), max_relative = 1e-14);
        }

        for depth in 2..6 {
            let z = GatedParams::balanced_from_effective(&[0.0, 0.0, 0.0], part(&[3]), depth).unwrap();
            assert!(z.omega().iter().all(|&x| x == 0.0));
            assert!(z.gamma().as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn surrogate_examples() {
        let g = GatedParams::balanced_from_effective(&[8.0], part(&[1]), 3).unwrap();
        assert_relative_eq!(g.surrogate_penalty(), 4.0, max_relative = 1e-14);
        let z = params(&[0.0, 0.0], &[&[0.0]], 2, &[2]);
        assert_eq!(z.surrogate_penalty(), 0.0);
        let g = params(&[1.0, 1.0], &[&[3.0]], 2, &[2]);
        assert_eq!(g.surrogate_penalty(), 5.5);
    }

    #[test]
    fn nonsmooth_examples() {
        let p = GroupPartition::contiguous(&[2, 3]).unwrap();
        let w = [3.0, 4.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(nonsmooth_penalty(&w, &p, 2).unwrap(), 5.0, max_relative = 1e-15);
        assert_relative_eq!(nonsmooth_penalty(&w, &p, 4).unwrap(), 2.236_067_977_499_79, max_relative = 1e-14);
        assert_eq!(nonsmooth_penalty(&[0.0; 5], &p, 3).unwrap(), 0.0);
        assert!(nonsmooth_penalty(&w, &p, 1).is_err());
    }

    #[test]
    fn misalignment_examples() {
        let mut rng = Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..6).map(|_| rng.gauss()).collect();
        let b = GatedParams::balanced_from_effective(&w, part(&[2, 4]), 4).unwrap();
        assert!(b.misalignment().abs() <= 1e-12);

        let g = params(&[2.0], &[&[1.0]], 2, &[1]);
        assert_relative_eq!(g.misalignment(), 0.5, max_relative = 1e-15);

        let z = params(&[0.0, 0.0], &[&[0.0, 0.0]], 3, &[2]);
        assert_eq!(z.misalignment(), 0.0);
    }

    #[test]
    fn misalignment_matches_penalty_difference() {
        let g = params(&[0.4, -1.1, 2.0], &[&[1.5, -0.7], &[0.2, 3.0]], 3, &[2, 1]);
        let direct = g.surrogate_penalty()
            - nonsmooth_penalty(&g.collapse(), g.partition(), g.depth()).unwrap();
        assert_relative_eq!(g.misalignment(), direct, max_relative = 1e-12);
    }

    #[test]
    fn imbalance_examples() {
        let g = params(&[1.0, 2.0], &[&[2.0]], 2, &[2]);
        assert_eq!(g.imbalance(0, 1, 2).unwrap(), 1.0);
        assert_eq!(g.imbalance(0, 2, 1).unwrap(), -1.0);
        assert!(g.imbalance(0, 1, 1).is_err());
        assert!(g.imbalance(0, 1, 3).is_err());
        assert!(g.imbalance(1, 1, 2).is_err());

        let g = params(&[0.5], &[&[3.0, 3.0]], 3, &[1]);
        assert_eq!(g.imbalance(0, 2, 3).unwrap(), 0.0);

        let b = GatedParams::balanced_from_effective(&[1.0, -2.0, 0.5], part(&[3]), 4).unwrap();
        for d in 1..=4 {
            for d2 in 1..=4 {
                if d != d2 {
                    assert!(b.imbalance(0, d, d2).unwrap().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn balance_report_examples() {
        let b = GatedParams::balanced_from_effective(&[1.0, 2.0, 0.0], part(&[2, 1]), 3).unwrap();
        let r = b.balance_report();
        assert!(r.per_group_imbalance_max.iter().all(|x| x.abs() < 1e-12));

        let omega_norm = libm::sqrt(5.0);
        let g = params(&[omega_norm], &[&[2.0, 1.0]], 3, &[1]);
        let r = g.balance_report();
        assert_relative_eq!(r.per_group_imbalance_max[0], 4.0, max_relative = 1e-14);

        let z = params(&[0.0], &[&[0.0, 0.0]], 3, &[1]);
        let r = z.balance_report();
        assert_eq!(r.per_group_imbalance_max[0], 0.0);
        assert_eq!(r.misalignment, 0.0);
    }

    #[test]
    fn gradient_examples() {
        let g = params(&[1.0], &[&[1.0, 1.0]], 3, &[1]);
        let gg = g.grads_from_effective(&[-2.0], 0.0).unwrap();
        assert_eq!(gg.omega.as_slice(), &[-2.0]);
        assert_eq!(gg.gamma.as_slice(), &[-2.0, -2.0]);

        let gg = g.grads_from_effective(&[-2.0], 0.3).unwrap();
        assert_relative_eq!(gg.omega[0], -1.8, max_relative = 1e-15);
        assert_relative_eq!(gg.gamma.get(0, 0), -1.8, max_relative = 1e-15);
        assert_relative_eq!(gg.gamma.get(0, 1), -1.8, max_relative = 1e-15);

        let g = params(&[0.3, -2.0, 1.0], &[&[0.5, 2.0], &[-1.0, 4.0]], 3, &[2, 1]);
        let gg = g.grads_from_effective(&[0.0; 3], 0.0).unwrap();
        assert!(gg.omega.iter().all(|&x| x == 0.0));
        assert!(gg.gamma.as_slice().iter().all(|&x| x == 0.0));

        assert!(g.grads_from_effective(&[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn zero_gate_annihilates_data_gradient() {
        let g = params(&[0.3, -2.0], &[&[0.0, 2.0]], 3, &[2]);
        assert_eq!(g.collapse().as_slice(), &[0.0, 0.0]);
        let gg = g.grads_from_effective(&[1.5, -0.5], 0.0).unwrap();
        assert_eq!(gg.omega.as_slice(), &[0.0, 0.0]);
        // the gate that is zero still sees the others
        assert_relative_eq!(gg.gamma.get(0, 0), 2.0 * (0.3 * 1.5 + 2.0 * 0.5));
        assert_eq!(gg.gamma.get(0, 1), 0.0);
    }

    /// Gated objective of a fixed quadratic `L0(w) = sum_i c_i (w_i - t_i)^2`.
    fn quad(w: &[f64], c: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
        let loss = w.iter().zip(c).zip(t).map(|((w, c), t)| c * (w - t) * (w - t)).sum();
        let grad = w.iter().zip(c).zip(t).map(|((w, c), t)| 2.0 * c * (w - t)).collect();
        (loss, grad)
    }

    #[test]
    fn gated_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(77);
        for depth in 2..=5 {
            for _ in 0..20 {
                let p = part(&[2, 3, 1]);
                let omega: Vec<f64> = (0..6).map(|_| rng.gauss()).collect();
                let gamma: Vec<f64> = (0..3 * (depth - 1)).map(|_| 0.5 + rng.uniform()).collect();
                let g = GatedParams::new(
                    omega.into(),
                    DenseMatrix::new(3, depth - 1, gamma).unwrap(),
                    depth,
                    p,
                )
                .unwrap();
                let c: Vec<f64> = (0..6).map(|_| 0.5 + rng.uniform()).collect();
                let t: Vec<f64> = (0..6).map(|_| rng.gauss()).collect();
                let lambda = 0.7;
                let objective = |g: &GatedParams| quad(&g.collapse(), &c, &t).0 + lambda * g.surrogate_penalty();
                let (_, gw) = quad(&g.collapse(), &c, &t);
                let analytic = g.grads_from_effective(&gw, lambda).unwrap();
                let mut flat = vec![0.0; g.n_params()];
                analytic.write_flat(&mut flat);
                let mut x = vec![0.0; g.n_params()];
                g.write_flat(&mut x);
                let h = 1e-6;
                for k in 0..x.len() {
                    let mut gp = g.clone();
                    let mut xp = x.clone();
                    xp[k] += h;
                    gp.read_flat(&xp);
                    let fp = objective(&gp);
                    xp[k] -= 2.0 * h;
                    gp.read_flat(&xp);
                    let fm = objective(&gp);
                    let fd = (fp - fm) / (2.0 * h);
                    let err = (fd - flat[k]).abs() / fd.abs().max(flat[k].abs()).max(1.0);
                    assert!(err < 1e-5, "depth {depth} coord {k}: fd {fd} analytic {}", flat[k]);
                }
            }
        }
    }

    fn arb_case() -> impl Strategy<Value = (Vec<usize>, usize, u64)> {
        (proptest::collection::vec(1usize..5, 1..6), 2usize..6, any::<u64>())
    }

    fn random_w(sizes: &[usize], seed: u64) -> Vec<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut w = Vec::new();
        for &s in sizes {
            let zero = rng.uniform() < 0.25;
            let scale = libm::exp(4.0 * rng.gauss());
            for _ in 0..s {
                w.push(if zero { 0.0 } else { scale * rng.gauss() });
            }
        }
        w
    }

    proptest! {
        #[test]
        fn balanced_round_trip((sizes, depth, seed) in arb_case()) {
            let p = part(&sizes);
            let w = random_w(&sizes, seed);
            let b = GatedParams::balanced_from_effective(&w, p.clone(), depth).unwrap();
            let back = b.collapse();
            for j in 0..p.len() {
                let norm = libm::sqrt(p.group_norm_sq(j, &w));
                for &i in p.group(j) {
                    prop_assert!((back[i] - w[i]).abs() <= 1e-12 * norm);
                }
            }
            let scale: f64 = b.squared_factors(0).iter().cloned().fold(1.0, f64::max);
            prop_assert!(b.misalignment().abs() <= 1e-12 * scale.max(1.0) * p.len() as f64);
        }

        #[test]
        fn misalignment_nonnegative(
            (sizes, depth, seed) in arb_case(),
        ) {
            let p = part(&sizes);
            let mut rng = Rng::seed_from_u64(seed);
            let omega: Vec<f64> = (0..p.p()).map(|_| rng.gauss()).collect();
            let gamma: Vec<f64> = (0..p.len() * (depth - 1)).map(|_| rng.gauss()).collect();
            let g = GatedParams::new(omega.into(), DenseMatrix::new(p.len(), depth - 1, gamma).unwrap(), depth, p).unwrap();
            let r = g.balance_report();
            prop_assert!(r.misalignment >= -1e-12);
            prop_assert!(r.per_group_imbalance_max.iter().all(|&x| x >= 0.0));
            prop_assert!((r.misalignment - g.misalignment()).abs() <= 1e-12 * (1.0 + r.misalignment));
        }
    }
}
