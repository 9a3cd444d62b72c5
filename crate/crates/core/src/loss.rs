//! The linear-covariance loss and its gradients.
//!
//! With `P = H^{-1}`, rows `g_j` of the stacked projection Jacobian, squared
//! weights `s_j` and squared residuals `m_j`, everything reduces to 6x6
//! algebra:
//!
//! ```text
//! C6      = P G P,   G = sum_j m_j s_j^2 g_j g_j^T     (= A diag(m) A^T)
//! delta   = P b,     b = sum_j s_j r_j g_j             (= A r)
//! E_cov   = reduce(diag(J C6 J^T))
//! E_prior = reduce(diag(J P J^T))
//! E_lin   = reduce((J delta)^2)
//! L       = log(E_prior) + 0.5 (E_cov + E_lin) / E_prior
//! ```
//!
//! Gradients follow the detach rules of the loss: the 2D locations reach
//! `L` only through the residuals inside `E_cov`; the weights reach all
//! three terms, including through `A`; the object points carry no gradient.
//! They are propagated in reverse through the 6x6 quantities, so one
//! evaluation costs `O(N)`.

use nalgebra::{DVector, Matrix6, Vector6};

use crate::covariance::{pose_cov, residual_cov, transform_cov_diag};
use crate::error::{Error, Result};
use crate::geometry::{represent, LocalPose6, PoseRepresentation};
use crate::linearize::{linearize_at, LinearizationResult};
use crate::pnp::CorrespondenceSet;
use crate::robust::{squares, HuberConfig};

/// Which NLL family binds the three terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distribution {
    /// Square roots of the grouped diagonals and grouped error norms.
    #[default]
    Laplace,
    /// Grouped traces and grouped squared errors.
    Gaussian,
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Laplace => "laplace",
            Self::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub representation: PoseRepresentation,
    pub distribution: Distribution,
    /// Added under every group square root.
    pub sqrt_eps: f64,
    /// Caps squared residuals and squared weights when set.
    pub huber: Option<HuberConfig>,
}

impl LossConfig {
    pub fn new(representation: PoseRepresentation) -> Self {
        Self { representation, distribution: Distribution::Laplace, sqrt_eps: 1e-12, huber: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sqrt_eps > 0.0) {
            return Err(Error::InvalidInput("sqrt_eps must be positive".into()));
        }
        if self.representation.kind.needs_bbox() && self.representation.bbox.is_none() {
            return Err(Error::MissingBBox(self.representation.kind.name()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub e_cov: f64,
    pub e_prior: f64,
    pub e_linear: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub e_cov: f64,
    pub e_prior: f64,
    pub e_linear: f64,
    pub l_lc: f64,
    /// `dL/dw`, flat `2N`.
    pub grad_w: DVector<f64>,
    /// `dL/dx`, flat `2N`.
    pub grad_x: DVector<f64>,
}

/// Mean over consecutive groups of `sqrt(group sum + sqrt_eps)`.
pub fn corner_norm_mean(d: &[f64], group_size: usize, sqrt_eps: f64) -> f64 {
    assert!(group_size > 0 && d.len().is_multiple_of(group_size), "length {} not divisible by {group_size}", d.len());
    let groups = d.len() / group_size;
    d.chunks_exact(group_size).map(|g| (g.iter().sum::<f64>() + sqrt_eps).sqrt()).sum::<f64>() / groups as f64
}

/// Value of the grouped reduction and its derivative with respect to every entry.
fn reduce(d: &[f64], group_size: usize, dist: Distribution, sqrt_eps: f64) -> (f64, Vec<f64>) {
    let groups = (d.len() / group_size) as f64;
    match dist {
        Distribution::Laplace => {
            let mut value = 0.0;
            let mut slope = Vec::with_capacity(d.len());
            for g in d.chunks_exact(group_size) {
                let root = (g.iter().sum::<f64>() + sqrt_eps).sqrt();
                value += root;
                slope.extend(std::iter::repeat_n(0.5 / (root * groups), group_size));
            }
            (value / groups, slope)
        }
        Distribution::Gaussian => (d.iter().sum::<f64>() / groups, vec![1.0 / groups; d.len()]),
    }
}

/// `log(E_prior) + 0.5 (E_cov + E_linear) / E_prior`.
///
/// The same skeleton serves both distributions; the Gaussian variant
/// differs only in how the terms were reduced.
pub fn lc_combine(e_cov: f64, e_prior: f64, e_linear: f64, _distribution: Distribution) -> Result<f64> {
    if !(e_prior > 0.0) || !e_prior.is_finite() {
        return Err(Error::NonPositivePrior(e_prior));
    }
    Ok(e_prior.ln() + 0.5 * (e_cov + e_linear) / e_prior)
}

struct Intermediates {
    terms: LossTerms,
    j: nalgebra::OMatrix<f64, nalgebra::Dyn, nalgebra::U6>,
    m: Vec<f64>,
    m_slope: Vec<f64>,
    g: Matrix6<f64>,
    delta: Vector6<f64>,
    v: DVector<f64>,
    cov_slope: Vec<f64>,
    prior_slope: Vec<f64>,
    lin_slope: Vec<f64>,
}

fn forward(lin: &LinearizationResult, cfg: &LossConfig) -> Result<Intermediates> {
    cfg.validate()?;
    let rep = &cfg.representation;
    let group = rep.kind.group_size();
    let j = represent(&LocalPose6::at(lin.y_gt_ref), rep)?.jacobian;
    let (m, m_slope) = squares(lin.r_gt.as_slice(), cfg.huber.as_ref());

    let c6 = pose_cov(&lin.a, &DVector::from_column_slice(&m));
    let p = &lin.hessian_inv;
    // G = P^{-1} C6 P^{-1}; accumulated directly to avoid the round trip.
    let mut g = Matrix6::zeros();
    for (jj, row) in lin.jacobian.row_iter().enumerate() {
        let s = lin.sq_weights[jj];
        let coeff = m[jj] * s * s;
        if coeff != 0.0 {
            g += row.transpose() * row * coeff;
        }
    }
    let delta = lin.increment_for(&lin.r_gt);
    let v = &j * delta;

    let d_cov = transform_cov_diag(&c6, &j);
    let d_prior = transform_cov_diag(p, &j);
    let d_lin: Vec<f64> = v.iter().map(|x| x * x).collect();

    let (e_cov, cov_slope) = reduce(d_cov.as_slice(), group, cfg.distribution, cfg.sqrt_eps);
    let (e_prior, prior_slope) = reduce(d_prior.as_slice(), group, cfg.distribution, cfg.sqrt_eps);
    let (e_linear, lin_slope) = reduce(&d_lin, group, cfg.distribution, cfg.sqrt_eps);
    Ok(Intermediates {
        terms: LossTerms { e_cov, e_prior, e_linear },
        j,
        m,
        m_slope,
        g,
        delta,
        v,
        cov_slope,
        prior_slope,
        lin_slope,
    })
}

/// The three loss terms of a linearization.
pub fn loss_terms(lin: &LinearizationResult, cfg: &LossConfig) -> Result<LossTerms> {
    Ok(forward(lin, cfg)?.terms)
}

/// `J^T diag(c) J`.
fn weighted_gram(j: &nalgebra::OMatrix<f64, nalgebra::Dyn, nalgebra::U6>, c: &[f64]) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    for (row, &ck) in j.row_iter().zip(c) {
        out += row.transpose() * row * ck;
    }
    out
}

/// Loss value and gradients for an already linearized scene.
pub fn lc_loss_from_linearization(lin: &LinearizationResult, cfg: &LossConfig) -> Result<LossBreakdown> {
    let f = forward(lin, cfg)?;
    let LossTerms { e_cov, e_prior, e_linear } = f.terms;
    let l_lc = lc_combine(e_cov, e_prior, e_linear, cfg.distribution)?;

    let dl_dcov = 0.5 / e_prior;
    let dl_dlin = 0.5 / e_prior;
    let dl_dprior = 1.0 / e_prior - 0.5 * (e_cov + e_linear) / (e_prior * e_prior);

    let lambda: Vec<f64> = f.cov_slope.iter().map(|c| c * dl_dcov).collect();
    let mu: Vec<f64> = f.prior_slope.iter().map(|c| c * dl_dprior).collect();
    let kappa = DVector::from_iterator(
        f.v.len(),
        f.lin_slope.iter().zip(f.v.iter()).map(|(c, v)| c * dl_dlin * 2.0 * v),
    );

    let p = &lin.hessian_inv;
    let q = weighted_gram(&f.j, &lambda);
    let r = weighted_gram(&f.j, &mu);
    let nu: Vector6<f64> = f.j.transpose() * kappa;
    let p_nu = p * nu;
    let gpq = f.g * p * q;

    let n2 = lin.r_gt.len();
    let mut grad_w = DVector::zeros(n2);
    let mut grad_x = DVector::zeros(n2);
    for (jj, row) in lin.jacobian.row_iter().enumerate() {
        let g = row.transpose();
        let u = p * g;
        let s = lin.sq_weights[jj];
        let rj = lin.r_gt[jj];
        let m = f.m[jj];
        let uqu = u.dot(&(q * u));

        // dL/ds_j: H and G inside E_cov, H inside E_prior, H and b inside E_linear.
        let d_s = -2.0 * u.dot(&(gpq * u)) + 2.0 * m * s * uqu - u.dot(&(r * u))
            + g.dot(&p_nu) * (rj - g.dot(&f.delta));
        grad_w[jj] = d_s * lin.sq_weight_slopes[jj];
        // dL/dm_j, then through m_j = rho(r_j^2).
        grad_x[jj] = s * s * uqu * f.m_slope[jj];
    }

    if grad_w.iter().chain(grad_x.iter()).any(|v| !v.is_finite()) || !l_lc.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(LossBreakdown { e_cov, e_prior, e_linear, l_lc, grad_w, grad_x })
}

/// Linearizes at the ground truth and evaluates the loss with gradients.
pub fn lc_loss(corrs: &CorrespondenceSet, y_gt: &crate::geometry::RigidPose, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let lin = linearize_at(corrs, y_gt, cfg.huber.as_ref())?;
    lc_loss_from_linearization(&lin, cfg)
}

/// Gradient-free recomputation of `L` used by the finite-difference checks:
/// `x` enters `E_cov` only, `E_linear` sees the residuals frozen at `r_frozen`.
#[doc(hidden)]
pub fn frozen_loss_value(
    corrs: &CorrespondenceSet,
    y_gt: &crate::geometry::RigidPose,
    r_frozen: &DVector<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    let lin = linearize_at(corrs, y_gt, cfg.huber.as_ref())?;
    let rep = &cfg.representation;
    let group = rep.kind.group_size();
    let j = represent(&LocalPose6::at(*y_gt), rep)?.jacobian;
    let m = residual_cov(&lin.r_gt, cfg.huber.as_ref());
    let d_cov = transform_cov_diag(&pose_cov(&lin.a, &m), &j);
    let d_prior = transform_cov_diag(&lin.hessian_inv, &j);
    let v = &j * lin.increment_for(r_frozen);
    let d_lin: Vec<f64> = v.iter().map(|x| x * x).collect();
    let e_cov = reduce(d_cov.as_slice(), group, cfg.distribution, cfg.sqrt_eps).0;
    let e_prior = reduce(d_prior.as_slice(), group, cfg.distribution, cfg.sqrt_eps).0;
    let e_linear = reduce(&d_lin, group, cfg.distribution, cfg.sqrt_eps).0;
    lc_combine(e_cov, e_prior, e_linear, cfg.distribution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundingBox, RepresentationKind};
    use crate::harness::{gen_scene, SceneConfig};
    use crate::pnp::unflatten;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, n: usize, noise: f64) -> (CorrespondenceSet, crate::geometry::RigidPose, BoundingBox) {
        let s = gen_scene(&SceneConfig { seed, n_points: n, noise_px: noise, ..SceneConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let w = (0..n).map(|_| Vector2::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0))).collect();
        (s.corrs.with_weights(w), s.y_gt, s.bbox)
    }

    #[test]
    fn corner_norm_mean_examples() {
        assert_eq!(corner_norm_mean(&[0.0; 24], 3, 0.0), 0.0);
        assert!((corner_norm_mean(&[1.0; 24], 3, 0.0) - 3f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut expect = 0.0;
        for i in 0..8 {
            expect += (d[3 * i] + d[3 * i + 1] + d[3 * i + 2] + 1e-12).sqrt();
        }
        assert!((corner_norm_mean(&d, 3, 1e-12) - expect / 8.0).abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        let lap = Distribution::Laplace;
        assert_eq!(lc_combine(0.0, 1.0, 0.0, lap).unwrap(), 0.0);
        assert_eq!(lc_combine(1.0, 1.0, 1.0, lap).unwrap(), 1.0);
        let e = std::f64::consts::E;
        assert!((lc_combine(e, e, e, lap).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(lc_combine(1.0, 0.0, 1.0, lap), Err(Error::NonPositivePrior(_))));
    }

    #[test]
    fn combine_is_stationary_at_half_the_error_sum() {
        let (c, l) = (0.8, 0.6);
        let p = 0.5 * (c + l);
        let h = 1e-6;
        let d = (lc_combine(c, p + h, l, Distribution::Laplace).unwrap()
            - lc_combine(c, p - h, l, Distribution::Laplace).unwrap())
            / (2.0 * h);
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn zero_residual_terms() {
        let (c, gt, bbox) = scene(2, 16, 0.0);
        let cfg = LossConfig::new(PoseRepresentation::corners3d(bbox));
        let out = lc_loss(&c, &gt, &cfg).unwrap();
        assert!(out.e_cov < 1e-5 && out.e_linear < 1e-5);
        assert!(out.e_prior > 0.0);
        assert!(out.grad_x.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weight_scale_only_moves_the_prior() {
        for seed in 0..20 {
            let (c, gt, bbox) = scene(seed, 16, 2.0);
            // exact only without the square-root stabilizer
            let cfg = LossConfig { sqrt_eps: f64::MIN_POSITIVE, ..LossConfig::new(PoseRepresentation::corners3d(bbox)) };
            let lin = linearize_at(&c, &gt, None).unwrap();
            let base = loss_terms(&lin, &cfg).unwrap();
            let k = 3.7;
            let scaled = c.with_weights(c.w.iter().map(|w| w * k).collect());
            let out = loss_terms(&linearize_at(&scaled, &gt, None).unwrap(), &cfg).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-12);
            assert!(close(out.e_prior, base.e_prior / k), "seed {seed}");
            assert!(close(out.e_cov, base.e_cov), "seed {seed}");
            assert!(close(out.e_linear, base.e_linear), "seed {seed}");
        }
    }

    #[test]
    fn linear_term_matches_represented_prediction() {
        let (c, gt, bbox) = scene(3, 20, 2.0);
        let rep = PoseRepresentation::corners3d(bbox);
        let lin = linearize_at(&c, &gt, None).unwrap();
        let terms = loss_terms(&lin, &LossConfig::new(rep)).unwrap();
        let y = represent(&LocalPose6::at(gt), &rep).unwrap();
        let d6 = lin.increment_for(&lin.r_gt);
        let delta = &y.jacobian * d6;
        let sq: Vec<f64> = delta.iter().map(|v| v * v).collect();
        assert!((corner_norm_mean(&sq, 3, 1e-12) - terms.e_linear).abs() < 1e-12);
        // and to first order through the full nonlinear representation
        let pred = represent(&crate::linearize::predict_pose_linear(&lin), &rep).unwrap();
        let exact: Vec<f64> = (pred.values - y.values).iter().map(|v| v * v).collect();
        let e_exact = corner_norm_mean(&exact, 3, 1e-12);
        assert!((e_exact - terms.e_linear).abs() < 0.05 * terms.e_linear);
    }

    #[test]
    fn gradients_match_frozen_differences() {
        let (c, gt, bbox) = scene(4, 10, 2.0);
        for dist in [Distribution::Laplace, Distribution::Gaussian] {
            let cfg = LossConfig { distribution: dist, ..LossConfig::new(PoseRepresentation::corners3d(bbox)) };
            let out = lc_loss(&c, &gt, &cfg).unwrap();
            let r0 = linearize_at(&c, &gt, None).unwrap().r_gt;
            let x = c.x_flat();
            let w = c.w_flat();
            let hx = 1e-4;
            let hw = 1e-5;
            for j in 0..x.len() {
                let eval_x = |d: f64| {
                    let mut xx = x.clone();
                    xx[j] += d;
                    frozen_loss_value(&c.with_points(unflatten(&xx)), &gt, &r0, &cfg).unwrap()
                };
                let fd = (eval_x(hx) - eval_x(-hx)) / (2.0 * hx);
                assert!((fd - out.grad_x[j]).abs() <= 1e-5 * out.grad_x.amax(), "x {j}");
                let eval_w = |d: f64| {
                    let mut ww = w.clone();
                    ww[j] += d;
                    frozen_loss_value(&c.with_weights(unflatten(&ww)), &gt, &r0, &cfg).unwrap()
                };
                let fd = (eval_w(hw) - eval_w(-hw)) / (2.0 * hw);
                assert!((fd - out.grad_w[j]).abs() <= 1e-5 * out.grad_w.amax(), "w {j}");
            }
        }
    }

    #[test]
    fn huber_gradients_match_frozen_differences() {
        // a fixed threshold keeps the cap constant under perturbation
        let (mut c, gt, bbox) = scene(5, 12, 2.0);
        c.x[0] += Vector2::new(30.0, -20.0);
        c.w[1] = Vector2::new(6.0, 0.3);
        let huber = HuberConfig::Fixed { delta: 3.0 };
        let cfg = LossConfig { huber: Some(huber), ..LossConfig::new(PoseRepresentation::corners3d(bbox)) };
        let out = lc_loss(&c, &gt, &cfg).unwrap();
        let r0 = linearize_at(&c, &gt, Some(&huber)).unwrap().r_gt;
        let (x, w) = (c.x_flat(), c.w_flat());
        let h = 1e-6;
        for j in 0..x.len() {
            let eval_x = |d: f64| {
                let mut xx = x.clone();
                xx[j] += d;
                frozen_loss_value(&c.with_points(unflatten(&xx)), &gt, &r0, &cfg).unwrap()
            };
            let fd = (eval_x(h) - eval_x(-h)) / (2.0 * h);
            assert!((fd - out.grad_x[j]).abs() <= 1e-5 * out.grad_x.amax(), "x {j}");
            let eval_w = |d: f64| {
                let mut ww = w.clone();
                ww[j] += d;
                frozen_loss_value(&c.with_weights(unflatten(&ww)), &gt, &r0, &cfg).unwrap()
            };
            let fd = (eval_w(h) - eval_w(-h)) / (2.0 * h);
            assert!((fd - out.grad_w[j]).abs() <= 1e-5 * out.grad_w.amax(), "w {j}");
        }
    }

    #[test]
    fn grad_x_is_radial_for_isotropic_weights() {
        let (c, gt, bbox) = scene(6, 16, 2.0);
        let iso = c.with_weights(c.w.iter().map(|w| Vector2::repeat(w.x)).collect());
        let out = lc_loss(&iso, &gt, &LossConfig::new(PoseRepresentation::corners3d(bbox))).unwrap();
        let r = linearize_at(&iso, &gt, None).unwrap().r_gt;
        // each component is a positive multiple of its residual
        for j in 0..r.len() {
            assert!(out.grad_x[j] * r[j] > 0.0);
        }
    }

    #[test]
    fn every_representation_evaluates() {
        let (c, gt, bbox) = scene(7, 16, 1.0);
        let kinds = [
            RepresentationKind::Corners3D,
            RepresentationKind::Corners2D(c.intrinsics),
            RepresentationKind::QuaternionTrans,
            RepresentationKind::AxisAngleTrans,
            RepresentationKind::TwoColumnTrans,
        ];
        for kind in kinds {
            let rep = PoseRepresentation::new(kind, Some(bbox));
            for dist in [Distribution::Laplace, Distribution::Gaussian] {
                let cfg = LossConfig { distribution: dist, ..LossConfig::new(rep) };
                let out = lc_loss(&c, &gt, &cfg).unwrap();
                assert!(out.e_cov >= 0.0 && out.e_prior > 0.0 && out.e_linear >= 0.0);
                assert!(out.l_lc.is_finite());
            }
        }
    }
}
