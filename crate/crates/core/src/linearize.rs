//! First-order model of the weighted PnP solver around a pose.
//!
//! At a stationary point `y*` of the NLL, the implicit function theorem
//! gives `dy/dx = -H^{-1} d2nll/dy dx`. Evaluated with perfect
//! correspondences at the ground truth the residuals vanish, the
//! Gauss-Newton Hessian is exact, and column `j` of the coefficient matrix
//! reduces to `s_j H^{-1} g_j`, where `g_j` is row `j` of the stacked
//! projection Jacobian and `s_j` the squared weight of that image axis.

use nalgebra::{DVector, Dyn, Matrix6, OMatrix, SymmetricEigen, Vector6, U6};

use crate::error::{Error, Result};
use crate::geometry::{project, LocalPose6, RigidPose};
use crate::pnp::{CorrespondenceSet, MIN_CORRESPONDENCES};
use crate::robust::{squares, HuberConfig};

/// Hessians at or above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationResult {
    /// Perfect projections `pi(z_i, y)`, flat `2N`.
    pub x_p: DVector<f64>,
    /// `x - x_p`, flat `2N`.
    pub r_gt: DVector<f64>,
    /// Stacked projection Jacobian, one row per image axis (`2N x 6`).
    pub jacobian: OMatrix<f64, Dyn, U6>,
    /// Squared weights `s_j` as used inside `H` and `A` (Huber capped when enabled).
    pub sq_weights: DVector<f64>,
    /// `ds_j / dw_j`.
    pub sq_weight_slopes: DVector<f64>,
    /// `sum_j s_j g_j g_j^T`.
    pub hessian: Matrix6<f64>,
    pub hessian_inv: Matrix6<f64>,
    /// `6 x 2N` map from residuals to the pose increment.
    pub a: OMatrix<f64, U6, Dyn>,
    pub y_gt_ref: RigidPose,
}

impl LinearizationResult {
    pub fn len(&self) -> usize {
        self.x_p.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.x_p.is_empty()
    }

    /// `A r` with a residual vector other than the stored one.
    pub fn increment_for(&self, r: &DVector<f64>) -> Vector6<f64> {
        &self.a * r
    }
}

/// Condition number of a symmetric matrix; infinite when it is not positive definite.
pub fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric positive-definite inverse, rejecting ill-conditioned input.
pub fn spd_inverse(h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let cond = condition_number(h);
    if !(cond < MAX_CONDITION) {
        return Err(Error::DegenerateHessian { condition: cond });
    }
    let chol = h.cholesky().ok_or(Error::DegenerateHessian { condition: cond })?;
    let inv = chol.inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

/// Linearizes the solver with perfect correspondences at `y_gt`.
pub fn linearize_at_gt(corrs: &CorrespondenceSet, y_gt: &RigidPose) -> Result<LinearizationResult> {
    linearize_at(corrs, y_gt, None)
}

/// Linearization kernel at an arbitrary pose.
///
/// At the ground truth this is the exact IFT map. At a solver optimum with
/// non-zero residuals it is the Gauss-Newton approximation of it.
pub fn linearize_at(
    corrs: &CorrespondenceSet,
    pose: &RigidPose,
    huber: Option<&HuberConfig>,
) -> Result<LinearizationResult> {
    corrs.validate()?;
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences { required: MIN_CORRESPONDENCES, actual: n });
    }
    let mut x_p = DVector::zeros(2 * n);
    let mut jacobian = OMatrix::<f64, Dyn, U6>::zeros(2 * n);
    for (i, z) in corrs.z.iter().enumerate() {
        let p = project(z, pose, &corrs.intrinsics)?;
        x_p.fixed_rows_mut::<2>(2 * i).copy_from(&p.uv);
        jacobian.fixed_rows_mut::<2>(2 * i).copy_from(&p.j_pose);
    }
    let r_gt = DVector::from_vec(corrs.x_flat()) - &x_p;
    let (s, ds) = squares(&corrs.w_flat(), huber);
    let sq_weights = DVector::from_vec(s);

    let mut hessian = Matrix6::zeros();
    for (j, row) in jacobian.row_iter().enumerate() {
        let g = row.transpose();
        hessian += g * g.transpose() * sq_weights[j];
    }
    let hessian = (hessian + hessian.transpose()) * 0.5;
    let hessian_inv = spd_inverse(&hessian)?;

    let mut a = OMatrix::<f64, U6, Dyn>::zeros(2 * n);
    for (j, row) in jacobian.row_iter().enumerate() {
        let col = hessian_inv * row.transpose() * sq_weights[j];
        a.set_column(j, &col);
    }

    Ok(LinearizationResult {
        x_p,
        r_gt,
        jacobian,
        sq_weights,
        sq_weight_slopes: DVector::from_vec(ds),
        hessian,
        hessian_inv,
        a,
        y_gt_ref: *pose,
    })
}

/// `y = y_gt + A r_gt` in the local chart.
pub fn predict_pose_linear(lin: &LinearizationResult) -> LocalPose6 {
    LocalPose6::from_vector(&lin.increment_for(&lin.r_gt), lin.y_gt_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_scene, SceneConfig};
    use crate::pnp::{nll, solve_weighted, unflatten, SolverConfig};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weighted_scene(seed: u64, n: usize, noise: f64) -> (CorrespondenceSet, RigidPose) {
        let cfg = SceneConfig { n_points: n, noise_px: noise, seed, ..SceneConfig::default() };
        let s = gen_scene(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let w = (0..n).map(|_| Vector2::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0))).collect();
        (s.corrs.with_weights(w), s.y_gt)
    }

    fn tight() -> SolverConfig {
        SolverConfig { step_tol: 1e-13, max_iters: 200, ..SolverConfig::default() }
    }

    #[test]
    fn perfect_correspondences_have_zero_residual() {
        let (c, gt) = weighted_scene(1, 12, 0.0);
        let lin = linearize_at_gt(&c, &gt).unwrap();
        assert!(lin.r_gt.iter().all(|&r| r == 0.0));
        let pred = predict_pose_linear(&lin);
        assert_eq!(pred.as_vector(), Vector6::zeros());
        assert_eq!(pred.to_pose(), gt);
    }

    #[test]
    fn columns_of_a_match_resolve_differences() {
        let h = 1e-4;
        for seed in 0..10 {
            let (c, gt) = weighted_scene(seed, 8, 0.0);
            let lin = linearize_at_gt(&c, &gt).unwrap();
            let base = lin.x_p.as_slice().to_vec();
            for j in 0..base.len() {
                let solve = |sign: f64| {
                    let mut x = base.clone();
                    x[j] += sign * h;
                    let sol = solve_weighted(&c.with_points(unflatten(&x)), &gt, &tight()).unwrap();
                    sol.pose.local_from(&gt).unwrap()
                };
                let fd = (solve(1.0) - solve(-1.0)) / (2.0 * h);
                let col = lin.a.column(j);
                let err = (fd - col).norm() / col.norm();
                assert!(err < 1e-3, "seed {seed} column {j}: {err}");
            }
        }
    }

    #[test]
    fn hessian_matches_second_differences() {
        let h = 1e-4;
        for seed in 0..10 {
            let (c, gt) = weighted_scene(seed, 10, 0.0);
            let lin = linearize_at_gt(&c, &gt).unwrap();
            let f = |d: Vector6<f64>| nll(&c, &gt.retract6(&d)).unwrap();
            let mut fd = Matrix6::zeros();
            for a in 0..6 {
                for b in 0..6 {
                    let (mut ea, mut eb) = (Vector6::zeros(), Vector6::zeros());
                    ea[a] = h;
                    eb[b] = h;
                    fd[(a, b)] = (f(ea + eb) - f(ea - eb) - f(eb - ea) + f(-ea - eb)) / (4.0 * h * h);
                }
            }
            let err = (fd - lin.hessian).norm() / lin.hessian.norm();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn hessian_matches_independent_loop() {
        let (c, gt) = weighted_scene(3, 16, 1.0);
        let lin = linearize_at_gt(&c, &gt).unwrap();
        let mut h = Matrix6::zeros();
        for i in 0..c.len() {
            let j = project(&c.z[i], &gt, &c.intrinsics).unwrap().j_pose;
            let d = nalgebra::Matrix2::from_diagonal(&c.w[i].component_mul(&c.w[i]));
            h += j.transpose() * d * j;
        }
        assert!((h - lin.hessian).abs().max() <= 1e-12 * h.abs().max());
    }

    #[test]
    fn a_recovers_small_pose_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let (c, gt) = weighted_scene(seed, 16, 0.0);
            let lin = linearize_at_gt(&c, &gt).unwrap();
            let dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let delta = dir * 1e-4;
            let moved = DVector::from_vec(crate::pnp::flatten(&c.projections(&gt.retract6(&delta)).unwrap()));
            let dx = moved - &lin.x_p;
            let err = (lin.increment_for(&dx) - delta).norm();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_weights_contribute_nothing() {
        let (mut c, gt) = weighted_scene(4, 12, 1.0);
        c.w[2] = Vector2::zeros();
        let lin = linearize_at_gt(&c, &gt).unwrap();
        assert!(lin.a.column(4).iter().all(|&v| v == 0.0));
        assert!(lin.a.column(5).iter().all(|&v| v == 0.0));
        let mut mask = vec![true; c.len()];
        mask[2] = false;
        let without = linearize_at_gt(&c.subset(&mask), &gt).unwrap();
        assert!((without.hessian - lin.hessian).abs().max() <= 1e-12 * lin.hessian.abs().max());
    }

    #[test]
    fn linear_prediction_error_is_second_order() {
        let cfg = tight();
        for seed in 0..100 {
            let (clean, gt) = weighted_scene(seed, 16, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let dist: rand_distr::Normal<f64> = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let eps: Vec<f64> = (0..2 * clean.len()).map(|_| rng.sample(dist)).collect();
            let gap = |sigma: f64| {
                let x: Vec<f64> = clean.x_flat().iter().zip(&eps).map(|(x, e)| x + sigma * e).collect();
                let c = clean.with_points(unflatten(&x));
                let lin = linearize_at_gt(&c, &gt).unwrap();
                let pred = predict_pose_linear(&lin).as_vector();
                let solved = solve_weighted(&c, &gt, &cfg).unwrap().pose.local_from(&gt).unwrap();
                (pred - solved).norm()
            };
            let ratio = gap(0.1) / gap(0.05);
            assert!((2.5..=6.0).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn prediction_is_linear_in_residuals() {
        let (c, gt) = weighted_scene(5, 12, 1.0);
        let lin = linearize_at_gt(&c, &gt).unwrap();
        let one = lin.increment_for(&lin.r_gt);
        let two = lin.increment_for(&(&lin.r_gt * 2.0));
        assert!((two - one * 2.0).abs().max() <= 1e-15 * one.abs().max());
    }

    #[test]
    fn degenerate_configuration_is_rejected() {
        let (mut c, gt) = weighted_scene(6, 6, 0.0);
        for w in c.w.iter_mut().skip(2) {
            *w = Vector2::zeros();
        }
        assert!(matches!(linearize_at_gt(&c, &gt), Err(Error::DegenerateHessian { .. })));
    }
}
