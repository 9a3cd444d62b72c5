//! Residual, pose and prior covariances, and their projection onto a
//! pose representation.
//!
//! The pose covariance is always formed in the 6D chart and pushed through
//! the representation Jacobian one diagonal entry at a time, so a K-vector
//! representation costs `O(36 N) + O(216) + O(36 K)` instead of the
//! `O(K^2 N)` of materializing the K x K covariance.

use nalgebra::{DVector, Dyn, Matrix6, OMatrix, SymmetricEigen, U6};

use crate::error::{Error, Result};
use crate::geometry::{represent, LocalPose6, PoseRepresentation};
use crate::linearize::{spd_inverse, LinearizationResult};
use crate::robust::{squares, HuberConfig};

/// Eigenvalues above this (negative) bound are treated as roundoff.
pub const PSD_TOLERANCE: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    pub c6: Matrix6<f64>,
    pub diag_k: DVector<f64>,
    pub prior_diag_k: DVector<f64>,
}

/// Diagonal of the residual covariance `M = diag(r o r)`.
pub fn residual_cov(r_gt: &DVector<f64>, huber: Option<&HuberConfig>) -> DVector<f64> {
    DVector::from_vec(squares(r_gt.as_slice(), huber).0)
}

/// `C = A diag(M) A^T`.
pub fn pose_cov(a: &OMatrix<f64, U6, Dyn>, m_diag: &DVector<f64>) -> Matrix6<f64> {
    assert_eq!(a.ncols(), m_diag.len(), "one residual variance per column of A");
    let mut c = Matrix6::zeros();
    for (col, &m) in a.column_iter().zip(m_diag.iter()) {
        if m != 0.0 {
            c += col * col.transpose() * m;
        }
    }
    (c + c.transpose()) * 0.5
}

/// `diag(J C J^T)` without forming the product.
pub fn transform_cov_diag(c6: &Matrix6<f64>, j: &OMatrix<f64, Dyn, U6>) -> DVector<f64> {
    let c = (c6 + c6.transpose()) * 0.5;
    DVector::from_iterator(
        j.nrows(),
        j.row_iter().map(|row| {
            let v = c * row.transpose();
            row.dot(&v.transpose())
        }),
    )
}

/// `C_prior = H^{-1}`.
pub fn prior_cov(h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    spd_inverse(&((h + h.transpose()) * 0.5))
}

/// Clamps roundoff-level negative eigenvalues to zero and rejects larger
/// violations.
pub fn repair_psd(c: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < PSD_TOLERANCE {
        return Err(Error::NotPositiveSemidefinite(min));
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(eig.eigenvectors * Matrix6::from_diagonal(&clamped) * eig.eigenvectors.transpose())
}

/// Pose covariance of a linearization, with both diagonals in `rep`.
pub fn pose_covariance(
    lin: &LinearizationResult,
    rep: &PoseRepresentation,
    huber: Option<&HuberConfig>,
) -> Result<CovarianceResult> {
    let m = residual_cov(&lin.r_gt, huber);
    let c6 = repair_psd(&pose_cov(&lin.a, &m))?;
    let j = represent(&LocalPose6::at(lin.y_gt_ref), rep)?.jacobian;
    let prior = prior_cov(&lin.hessian)?;
    Ok(CovarianceResult {
        diag_k: transform_cov_diag(&c6, &j).map(|v| v.max(0.0)),
        prior_diag_k: transform_cov_diag(&prior, &j),
        c6,
    })
}

/// `|A - B|_F / |B|_F`.
pub fn relative_frobenius(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_scene, SceneConfig};
    use crate::linearize::linearize_at_gt;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_cov_examples() {
        assert_eq!(residual_cov(&DVector::zeros(4), None), DVector::zeros(4));
        assert_eq!(residual_cov(&DVector::from_vec(vec![1.0, -2.0]), None), DVector::from_vec(vec![1.0, 4.0]));
        let huber = HuberConfig::Fixed { delta: 3.0 };
        assert_eq!(residual_cov(&DVector::from_vec(vec![10.0]), Some(&huber))[0], 51.0);
    }

    #[test]
    fn pose_cov_examples() {
        let mut a = OMatrix::<f64, U6, Dyn>::zeros(10);
        assert_eq!(pose_cov(&a, &DVector::zeros(10)), Matrix6::zeros());
        a.fixed_columns_mut::<6>(0).copy_from(&Matrix6::identity());
        assert_eq!(pose_cov(&a, &DVector::repeat(10, 1.0)), Matrix6::identity());
    }

    #[test]
    fn transform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let c = b * b.transpose();
        let eye = OMatrix::<f64, Dyn, U6>::identity(6);
        assert!((transform_cov_diag(&c, &eye) - c.diagonal()).abs().max() < 1e-15);
        let two = &eye * 2.0;
        assert!((transform_cov_diag(&c, &two) - c.diagonal() * 4.0).abs().max() < 1e-14);
    }

    #[test]
    fn transform_matches_full_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let b = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let c = b * b.transpose();
            let j = OMatrix::<f64, Dyn, U6>::from_fn(24, |_, _| rng.random_range(-1.0..1.0));
            let full = (&j * c * j.transpose()).diagonal();
            assert!((transform_cov_diag(&c, &j) - full).abs().max() < 1e-12);
        }
    }

    #[test]
    fn prior_cov_examples() {
        assert_eq!(prior_cov(&Matrix6::identity()).unwrap(), Matrix6::identity());
        let p = prior_cov(&(Matrix6::identity() * 4.0)).unwrap();
        assert!((p - Matrix6::identity() * 0.25).abs().max() < 1e-16);
        assert!(prior_cov(&Matrix6::zeros()).is_err());
    }

    #[test]
    fn prior_cov_inverts_scene_hessian() {
        for seed in 0..10 {
            let s = gen_scene(&SceneConfig { seed, n_points: 20, ..SceneConfig::default() }).unwrap();
            let lin = linearize_at_gt(&s.corrs, &s.y_gt).unwrap();
            let p = prior_cov(&lin.hessian).unwrap();
            assert!((p * lin.hessian - Matrix6::identity()).abs().max() < 1e-8);
        }
    }

    #[test]
    fn noise_scaling_is_quadratic() {
        let s = gen_scene(&SceneConfig { seed: 4, n_points: 20, noise_px: 1.0, ..SceneConfig::default() }).unwrap();
        let lin = linearize_at_gt(&s.corrs, &s.y_gt).unwrap();
        let c1 = pose_cov(&lin.a, &residual_cov(&lin.r_gt, None));
        let c3 = pose_cov(&lin.a, &residual_cov(&(&lin.r_gt * 3.0), None));
        assert!((c3 - c1 * 9.0).abs().max() <= 1e-12 * c3.abs().max());
    }

    #[test]
    fn psd_repair() {
        let mut c = Matrix6::identity();
        c[(5, 5)] = -1e-12;
        let fixed = repair_psd(&c).unwrap();
        assert!(SymmetricEigen::new(fixed).eigenvalues.min() >= -1e-15);
        c[(5, 5)] = -1e-6;
        assert!(matches!(repair_psd(&c), Err(Error::NotPositiveSemidefinite(_))));
    }

    proptest! {
        #[test]
        fn transform_ignores_antisymmetric_part(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let c = b * b.transpose();
            let s = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let skew = s - s.transpose();
            let j = OMatrix::<f64, Dyn, U6>::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let d = transform_cov_diag(&c, &j) - transform_cov_diag(&(c + skew), &j);
            prop_assert!(d.abs().max() < 1e-12);
        }
    }
}
