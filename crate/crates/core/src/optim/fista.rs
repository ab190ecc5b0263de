use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Result};
use crate::grouping::GroupPartition;
use crate::models::Dataset;
use crate::numerics::{dot_unchecked, spectral_norm_sq, DenseMatrix, DenseVector, Rng};

/// Group lasso solution and solver bookkeeping.
#[derive(Clone, Debug)]
pub struct FistaOutcome {
    pub w: DenseVector,
    pub objective: f64,
    pub iters: usize,
    pub restarts: usize,
    /// Objective after every accepted step, starting with the initial point.
    pub objectives: Vec<f64>,
}

/// `sum_i (y_i - x_i^T w)^2 + lambda sum_j ||w_j||_2`.
pub fn group_lasso_objective(data: &Dataset, partition: &GroupPartition, lambda: f64, w: &[f64]) -> Result<f64> {
    let y = data.y()?;
    check_len("group_lasso_objective", data.n_features(), w.len())?;
    let x = data.x();
    let loss: f64 = (0..x.rows())
        .map(|i| {
            let r = y[i] - dot_unchecked(x.row(i), w);
            r * r
        })
        .sum();
    let pen: f64 = partition.group_norms(w)?.iter().sum();
    Ok(loss + lambda * pen)
}

/// Group-wise prox of `thresh * sum_j ||v_j||`: `v_j <- max(0, 1 - thresh / ||v_j||) v_j`.
pub fn block_soft_threshold(v: &mut [f64], partition: &GroupPartition, thresh: f64) {
    for (j, g) in partition.groups().iter().enumerate() {
        let norm = libm::sqrt(partition.group_norm_sq(j, v));
        let scale = if norm <= thresh { 0.0 } else { 1.0 - thresh / norm };
        g.iter().for_each(|&i| v[i] *= scale);
    }
}

/// Accelerated proximal gradient for the depth-2 group lasso with adaptive
/// restart.
///
/// The Gram matrix `X^T X` is formed once, so each iteration costs one
/// `p x p` matrix-vector product and repeated solves along a lambda path are
/// cheap. A step that increases the objective is rejected and momentum
/// reset; if that happens twice in a row the Lipschitz estimate is doubled.
#[derive(Clone, Debug)]
pub struct FistaSolver {
    gram: DenseMatrix,
    xty: DenseVector,
    yty: f64,
    lipschitz: f64,
    partition: GroupPartition,
}

impl FistaSolver {
    pub fn new(data: &Dataset, partition: &GroupPartition) -> Result<Self> {
        let y = data.y()?;
        check_len("FistaSolver (partition)", data.n_features(), partition.p())?;
        let x = data.x();
        let mut rng = Rng::seed_from_u64(0x5eed);
        let lipschitz = 2.0 * spectral_norm_sq(x, 1000, &mut rng)? * (1.0 + 1e-9);
        Ok(Self {
            gram: x.gram(),
            xty: x.transpose_matvec(y)?,
            yty: y.norm_sq(),
            lipschitz,
            partition: partition.clone(),
        })
    }

    /// Initial Lipschitz estimate `2 ||X||_2^2`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn gram_apply(&self, w: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot_unchecked(self.gram.row(i), w);
        }
    }

    fn objective_with(&self, w: &[f64], gw: &[f64], lambda: f64) -> f64 {
        let quad = self.yty - 2.0 * dot_unchecked(w, &self.xty) + dot_unchecked(w, gw);
        let pen: f64 = (0..self.partition.len())
            .map(|j| libm::sqrt(self.partition.group_norm_sq(j, w)))
            .sum();
        quad + lambda * pen
    }

    /// Runs at most `iters` iterations from `warm` (zero when `None`) and
    /// stops once an accepted step changes the objective by less than
    /// `tol * max(1, |F|)`.
    pub fn solve(&self, lambda: f64, warm: Option<&[f64]>, iters: usize, tol: f64) -> Result<FistaOutcome> {
        if iters == 0 {
            return Err(invalid("iters must be at least 1"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda must be finite and nonnegative"));
        }
        let p = self.partition.p();
        let mut x = match warm {
            Some(w) => {
                check_len("FistaSolver::solve (warm start)", p, w.len())?;
                w.to_vec()
            }
            None => vec![0.0; p],
        };
        let mut gx = vec![0.0; p];
        self.gram_apply(&x, &mut gx);
        let mut x_prev = x.clone();
        let mut gx_prev = gx.clone();
        let mut f = self.objective_with(&x, &gx, lambda);
        let mut objectives = vec![f];

        let mut lip = self.lipschitz.max(f64::MIN_POSITIVE);
        let mut t = 1.0_f64;
        let mut restarts = 0;
        let mut just_restarted = false;
        let mut z = vec![0.0; p];
        let mut gz = vec![0.0; p];
        let mut done = 0;

        for it in 0..iters {
            done = it + 1;
            let t_next = 0.5 * (1.0 + libm::sqrt(1.0 + 4.0 * t * t));
            let beta = (t - 1.0) / t_next;
            let s = 1.0 / lip;
            // gradient step from the extrapolated point, G y formed from G x terms
            for i in 0..p {
                let yi = x[i] + beta * (x[i] - x_prev[i]);
                let gyi = gx[i] + beta * (gx[i] - gx_prev[i]);
                z[i] = yi - s * 2.0 * (gyi - self.xty[i]);
            }
            block_soft_threshold(&mut z, &self.partition, s * lambda);
            self.gram_apply(&z, &mut gz);
            let f_new = self.objective_with(&z, &gz, lambda);

            if f_new > f {
                restarts += 1;
                if just_restarted {
                    lip *= 2.0;
                }
                just_restarted = true;
                t = 1.0;
                x_prev.copy_from_slice(&x);
                gx_prev.copy_from_slice(&gx);
                continue;
            }
            just_restarted = false;
            core::mem::swap(&mut x_prev, &mut x);
            core::mem::swap(&mut gx_prev, &mut gx);
            x.copy_from_slice(&z);
            gx.copy_from_slice(&gz);
            t = t_next;
            let change = f - f_new;
            f = f_new;
            objectives.push(f);
            if change <= tol * f.abs().max(1.0) {
                break;
            }
        }
        Ok(FistaOutcome {
            w: x.into(),
            objective: f,
            iters: done,
            restarts,
            objectives,
        })
    }
}

/// Solves `min sum_i (y_i - x_i^T w)^2 + lambda sum_j ||w_j||_2` from zero.
pub fn fista_group_lasso(
    data: &Dataset,
    partition: &GroupPartition,
    lambda: f64,
    iters: usize,
    tol: f64,
) -> Result<DenseVector> {
    Ok(FistaSolver::new(data, partition)?.solve(lambda, None, iters, tol)?.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cholesky_solve;
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    fn problem(seed: u64, n: usize, sizes: &[usize]) -> (Dataset, GroupPartition) {
        let mut rng = Rng::seed_from_u64(seed);
        let part = GroupPartition::contiguous(sizes).unwrap();
        let p = part.p();
        let x = DenseMatrix::new(n, p, (0..n * p).map(|_| rng.gauss()).collect()).unwrap();
        let y = (0..n).map(|_| rng.gauss()).collect();
        (Dataset::regression(x, y).unwrap(), part)
    }

    #[test]
    fn prox_examples() {
        let part = GroupPartition::contiguous(&[2, 2]).unwrap();
        let mut v = [3.0, 4.0, 0.3, -0.4];
        block_soft_threshold(&mut v, &part, 2.5);
        assert_eq!(v, [1.5, 2.0, 0.0, 0.0]);
        let mut edge = [3.0, 4.0, 0.0, 0.0];
        block_soft_threshold(&mut edge, &part, 5.0);
        assert_eq!(edge, [0.0; 4]);
    }

    #[test]
    fn unpenalized_solution_matches_normal_equations() {
        let (data, part) = problem(1, 20, &[2, 3, 5]);
        let w = fista_group_lasso(&data, &part, 0.0, 20_000, 0.0).unwrap();
        let x = data.x();
        let y = data.y().unwrap();
        let xty = x.transpose_matvec(y).unwrap();
        let ols = cholesky_solve(&x.gram(), &xty).unwrap();
        // gradient 2 X^T (Xw - y)
        let gw: Vec<f64> = (0..10).map(|i| dot_unchecked(x.gram().row(i), &w)).collect();
        let grad_norm = libm::sqrt(gw.iter().zip(xty.iter()).map(|(a, b)| 4.0 * (a - b) * (a - b)).sum::<f64>());
        assert!(grad_norm < 1e-6, "{grad_norm}");
        for (a, b) in w.iter().zip(ols.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn large_lambda_gives_zero() {
        let (data, part) = problem(2, 30, &[3, 3]);
        let solver = FistaSolver::new(&data, &part).unwrap();
        let xty = data.x().transpose_matvec(data.y().unwrap()).unwrap();
        let lambda_max = (0..2)
            .map(|j| 2.0 * libm::sqrt(part.group_norm_sq(j, &xty)))
            .fold(0.0, f64::max);
        let out = solver.solve(lambda_max * 1.01, None, 100, 1e-12).unwrap();
        assert!(out.w.iter().all(|&v| v == 0.0));
        let out = solver.solve(lambda_max * 0.5, None, 5000, 1e-14).unwrap();
        assert!(out.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn objective_matches_direct_formula_and_is_monotone() {
        let (data, part) = problem(3, 25, &[2, 2, 4]);
        let solver = FistaSolver::new(&data, &part).unwrap();
        let out = solver.solve(3.0, None, 3000, 1e-14).unwrap();
        let direct = group_lasso_objective(&data, &part, 3.0, &out.w).unwrap();
        assert!((direct - out.objective).abs() <= 1e-9 * direct);
        assert!(out.objectives.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn warm_start_at_optimum_stays() {
        let (data, part) = problem(4, 25, &[2, 2, 4]);
        let solver = FistaSolver::new(&data, &part).unwrap();
        let cold = solver.solve(5.0, None, 10_000, 1e-15).unwrap();
        let warm = solver.solve(5.0, Some(&cold.w), 10_000, 1e-15).unwrap();
        assert!(warm.iters < cold.iters);
        assert!((warm.objective - cold.objective).abs() <= 1e-10 * cold.objective);
    }

    #[test]
    fn rejects_bad_input() {
        let (data, part) = problem(5, 10, &[2, 2]);
        assert!(fista_group_lasso(&data, &part, 1.0, 0, 1e-9).is_err());
        let wrong = GroupPartition::contiguous(&[3]).unwrap();
        assert!(FistaSolver::new(&data, &wrong).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn support_invariant_to_group_order(seed in any::<u64>(), lambda in 1.0f64..20.0) {
            let (data, part) = problem(seed, 30, &[2, 3, 2, 3]);
            let mut rng = Rng::seed_from_u64(seed ^ 1);
            let mut order: Vec<usize> = (0..part.len()).collect();
            rng.shuffle(&mut order);
            let permuted = GroupPartition::from_groups(
                order.iter().map(|&j| part.group(j).to_vec()).collect(),
            ).unwrap();
            let a = fista_group_lasso(&data, &part, lambda, 20_000, 1e-15).unwrap();
            let b = fista_group_lasso(&data, &permuted, lambda, 20_000, 1e-15).unwrap();
            let sa = part.active_groups(&a, 1e-8).unwrap();
            let sb: Vec<usize> = {
                let mut s: Vec<usize> = permuted.active_groups(&b, 1e-8).unwrap().iter().map(|&k| order[k]).collect();
                s.sort_unstable();
                s
            };
            prop_assert_eq!(sa, sb);
        }
    }
}
