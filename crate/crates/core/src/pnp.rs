//! Weighted nonlinear least-squares PnP and a RANSAC front end.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, RigidPose};
use crate::robust::{huber_cost, irls_weight};

/// Minimal number of correspondences accepted by the solvers.
pub const MIN_CORRESPONDENCES: usize = 4;

/// Largest undamped increment accepted at convergence, relative to `1 + |t|`.
const GN_STEP_TOL: f64 = 1e-11;

/// `N` correspondences `(x_i, z_i, w_i)` and the camera they were observed with.
///
/// Weights act per image axis, so `w_i` is a 2-vector like `x_i`. Flat
/// `2N` vectors used by the loss gradients interleave the axes:
/// `[u_0, v_0, u_1, v_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub x: Vec<Vector2<f64>>,
    pub z: Vec<Vector3<f64>>,
    pub w: Vec<Vector2<f64>>,
    pub intrinsics: CameraIntrinsics,
}

impl CorrespondenceSet {
    pub fn new(
        x: Vec<Vector2<f64>>,
        z: Vec<Vector3<f64>>,
        w: Vec<Vector2<f64>>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        let set = Self { x, z, w, intrinsics };
        set.validate()?;
        Ok(set)
    }

    /// Unit weights for every correspondence.
    pub fn unweighted(x: Vec<Vector2<f64>>, z: Vec<Vector3<f64>>, intrinsics: CameraIntrinsics) -> Result<Self> {
        let w = vec![Vector2::repeat(1.0); x.len()];
        Self::new(x, z, w, intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.x.len() != self.z.len() || self.x.len() != self.w.len() {
            return Err(Error::InvalidInput(format!(
                "length mismatch: {} image points, {} object points, {} weights",
                self.x.len(),
                self.z.len(),
                self.w.len()
            )));
        }
        if self.w.iter().any(|w| !(w.x >= 0.0 && w.y >= 0.0)) {
            return Err(Error::InvalidInput("weights must be non-negative".into()));
        }
        let finite = self.x.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.z.iter().all(|v| v.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::InvalidInput("non-finite coordinates".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn with_weights(&self, w: Vec<Vector2<f64>>) -> Self {
        Self { w, ..self.clone() }
    }

    pub fn with_points(&self, x: Vec<Vector2<f64>>) -> Self {
        Self { x, ..self.clone() }
    }

    /// Keeps the correspondences where `mask` is true.
    pub fn subset(&self, mask: &[bool]) -> Self {
        let pick = |i: &usize| mask[*i];
        let idx: Vec<usize> = (0..self.len()).filter(pick).collect();
        Self {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            w: idx.iter().map(|&i| self.w[i]).collect(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn x_flat(&self) -> Vec<f64> {
        flatten(&self.x)
    }

    pub fn w_flat(&self) -> Vec<f64> {
        flatten(&self.w)
    }

    /// Residuals `x_i - pi(z_i, pose)`.
    pub fn residuals(&self, pose: &RigidPose) -> Result<Vec<Vector2<f64>>> {
        self.x
            .iter()
            .zip(&self.z)
            .map(|(x, z)| Ok(x - project(z, pose, &self.intrinsics)?.uv))
            .collect()
    }

    /// Perfect projections `pi(z_i, pose)`.
    pub fn projections(&self, pose: &RigidPose) -> Result<Vec<Vector2<f64>>> {
        self.z.iter().map(|z| Ok(project(z, pose, &self.intrinsics)?.uv)).collect()
    }
}

pub fn flatten(v: &[Vector2<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y]).collect()
}

pub fn unflatten(v: &[f64]) -> Vec<Vector2<f64>> {
    v.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Converged once `|grad| <= step_tol * (1 + cost)`.
    pub step_tol: f64,
    /// Initial Levenberg-Marquardt damping.
    pub damping_init: f64,
    /// Huber threshold on weighted residual components, in pixels.
    pub huber_delta: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 100, step_tol: 1e-8, damping_init: 1e-3, huber_delta: None }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.step_tol > 0.0) || !(self.damping_init > 0.0) {
            return Err(Error::InvalidInput("solver needs max_iters >= 1 and positive tolerances".into()));
        }
        if let Some(d) = self.huber_delta {
            if !(d > 0.0) {
                return Err(Error::InvalidInput("huber_delta must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSolution {
    pub pose: RigidPose,
    /// Number of damped steps attempted.
    pub iters: usize,
    /// Objective at `pose`: the NLL, or its Huber version when enabled.
    pub final_nll: f64,
    pub converged: bool,
}

/// Weighted reprojection NLL `1/2 sum |w_i o r_i|^2`.
pub fn nll(corrs: &CorrespondenceSet, pose: &RigidPose) -> Result<f64> {
    let mut total = 0.0;
    for ((x, z), w) in corrs.x.iter().zip(&corrs.z).zip(&corrs.w) {
        let r = x - project(z, pose, &corrs.intrinsics)?.uv;
        total += (w.component_mul(&r)).norm_squared();
    }
    Ok(0.5 * total)
}

struct Normal {
    cost: f64,
    hessian: Matrix6<f64>,
    /// Gauss-Newton right-hand side, minus the gradient of the cost.
    rhs: Vector6<f64>,
    uv: Vec<Vector2<f64>>,
}

/// `old.cost - new.cost`, summed per term so it still resolves steps whose
/// effect is below the rounding of the total cost, with a bound on its
/// rounding error.
fn decrease(corrs: &CorrespondenceSet, old: &Normal, new: &Normal, huber: Option<f64>) -> (f64, f64) {
    let (mut total, mut err) = (0.0, 0.0);
    for (((x, w), uo), un) in corrs.x.iter().zip(&corrs.w).zip(&old.uv).zip(&new.uv) {
        for a in 0..2 {
            let (ro, rn) = (x[a] - uo[a], x[a] - un[a]);
            let (ho, hn) = match huber {
                None => (0.5 * (w[a] * ro).powi(2), 0.5 * (w[a] * rn).powi(2)),
                Some(d) => (huber_cost(w[a] * ro, d), huber_cost(w[a] * rn, d)),
            };
            total += match huber {
                None => 0.5 * w[a] * w[a] * (un[a] - uo[a]) * (ro + rn),
                Some(_) => ho - hn,
            };
            let scale = 0.5 * w[a] * w[a] * (ro.abs() + rn.abs()) * (x[a].abs() + uo[a].abs() + un[a].abs());
            err += 8.0 * f64::EPSILON * (scale + ho + hn);
        }
    }
    (total, err)
}

fn normal_equations(corrs: &CorrespondenceSet, pose: &RigidPose, huber: Option<f64>) -> Result<Normal> {
    let mut cost = 0.0;
    let mut hessian = Matrix6::zeros();
    let mut rhs = Vector6::zeros();
    let mut uv = Vec::with_capacity(corrs.len());
    for ((x, z), w) in corrs.x.iter().zip(&corrs.z).zip(&corrs.w) {
        let p = project(z, pose, &corrs.intrinsics)?;
        let r = x - p.uv;
        uv.push(p.uv);
        for a in 0..2 {
            let e = w[a] * r[a];
            let (s, c) = match huber {
                None => (w[a] * w[a], 0.5 * e * e),
                Some(d) => (w[a] * w[a] * irls_weight(e, d), huber_cost(e, d)),
            };
            cost += c;
            if s == 0.0 {
                continue;
            }
            let g = p.j_pose.row(a).transpose();
            hessian += g * g.transpose() * s;
            rhs += g * (s * r[a]);
        }
    }
    Ok(Normal { cost, hessian, rhs, uv })
}

/// Levenberg-Marquardt on the weighted NLL in the local chart.
///
/// The reference pose is re-anchored after every accepted step, and the
/// damping is scaled by the Hessian diagonal so the iterates do not depend
/// on a global rescaling of the weights. Accepted steps never increase the
/// objective.
pub fn solve_weighted(corrs: &CorrespondenceSet, init: &RigidPose, cfg: &SolverConfig) -> Result<WeightedSolution> {
    cfg.validate()?;
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences { required: MIN_CORRESPONDENCES, actual: corrs.len() });
    }
    let mut pose = *init;
    let mut current = normal_equations(corrs, &pose, cfg.huber_delta)?;
    if current.hessian.cholesky().is_none() {
        return Err(Error::SingularHessian);
    }
    let mut lambda = cfg.damping_init;
    let mut iters = 0;
    loop {
        // The gradient test alone depends on the weight scale; the
        // Gauss-Newton increment does not.
        let gn_small = current
            .hessian
            .cholesky()
            .is_some_and(|c| c.solve(&current.rhs).norm() <= GN_STEP_TOL * (1.0 + pose.translation.norm()));
        if current.rhs.norm() <= cfg.step_tol * (1.0 + current.cost) && gn_small {
            return Ok(WeightedSolution { pose, iters, final_nll: current.cost, converged: true });
        }
        if iters >= cfg.max_iters {
            let best = WeightedSolution { pose, iters, final_nll: current.cost, converged: false };
            return Err(Error::MaxItersExceeded { best: Box::new(best) });
        }
        iters += 1;

        let mut damped = current.hessian;
        for i in 0..6 {
            damped[(i, i)] += lambda * current.hessian[(i, i)];
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            if lambda > 1e16 {
                return Err(Error::SingularHessian);
            }
            continue;
        };
        let step = chol.solve(&current.rhs);
        let candidate = pose.retract6(&step);
        let next = normal_equations(corrs, &candidate, cfg.huber_delta)
            .ok()
            .map(|n| (decrease(corrs, &current, &n, cfg.huber_delta), n));
        match next {
            // Below rounding, the gradient decides.
            Some(((progress, err), next))
                if progress >= 0.0 || (-progress <= err && next.rhs.norm() < current.rhs.norm()) =>
            {
                let progress = progress.max(0.0);
                pose = candidate;
                let stalled = progress <= 1e-15 * current.cost.max(1e-300)
                    && step.norm() <= 1e-12 * (1.0 + pose.translation.norm());
                current = next;
                lambda = (lambda * 0.1).max(1e-12);
                if stalled {
                    // Numerically stationary: the objective no longer resolves the step.
                    return Ok(WeightedSolution { pose, iters, final_nll: current.cost, converged: true });
                }
            }
            _ => {
                if step.norm() <= 1e-14 * (1.0 + pose.translation.norm()) {
                    return Ok(WeightedSolution { pose, iters, final_nll: current.cost, converged: true });
                }
                lambda *= 10.0;
            }
        }
    }
}

/// Like [`solve_weighted`] but returns the best iterate when the iteration
/// budget runs out.
pub fn solve_weighted_best(corrs: &CorrespondenceSet, init: &RigidPose, cfg: &SolverConfig) -> Result<WeightedSolution> {
    match solve_weighted(corrs, init, cfg) {
        Err(Error::MaxItersExceeded { best }) => Ok(*best),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Upper bound on sampled hypotheses.
    pub iters: usize,
    /// Reprojection threshold in pixels.
    pub inlier_px: f64,
    pub min_set: usize,
    /// Stops early once this probability of having drawn an all-inlier sample is reached.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iters: 500, inlier_px: 2.0, min_set: MIN_CORRESPONDENCES, confidence: 0.999, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacSolution {
    pub pose: RigidPose,
    pub inlier_mask: Vec<bool>,
}

impl RansacSolution {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// The 24 proper rotations of the cube, used as starting orientations for
/// the minimal-sample solves.
fn cube_rotations() -> Vec<Matrix3<f64>> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Translation placing the object centroid on the ray through the image
/// centroid, at the depth where projected and observed spreads agree.
fn coarse_translation(corrs: &CorrespondenceSet, rotation: &Matrix3<f64>) -> Vector3<f64> {
    let n = corrs.len() as f64;
    let c2 = corrs.x.iter().sum::<Vector2<f64>>() / n;
    let c3 = corrs.z.iter().sum::<Vector3<f64>>() / n;
    let spread2 = corrs.x.iter().map(|x| (x - c2).norm()).sum::<f64>() / n;
    let spread3 = corrs.z.iter().map(|z| (z - c3).norm()).sum::<f64>() / n;
    let k = &corrs.intrinsics;
    let f = 0.5 * (k.fx + k.fy);
    let depth = if spread2 > 0.0 { f * spread3 / spread2 } else { 1.0 };
    let ray = Vector3::new((c2.x - k.cx) / k.fx, (c2.y - k.cy) / k.fy, 1.0);
    ray * depth - rotation * c3
}

fn max_reprojection_error(corrs: &CorrespondenceSet, pose: &RigidPose) -> f64 {
    corrs
        .x
        .iter()
        .zip(&corrs.z)
        .map(|(x, z)| project(z, pose, &corrs.intrinsics).map_or(f64::INFINITY, |p| (x - p.uv).norm()))
        .fold(0.0, f64::max)
}

/// Pose from a minimal sample: damped solves from the coarse translation
/// and each cube orientation, keeping the best fit.
fn minimal_pose(sample: &CorrespondenceSet, accept_px: f64, starts: &[Matrix3<f64>]) -> Option<RigidPose> {
    let cfg = SolverConfig { max_iters: 60, step_tol: 1e-10, ..SolverConfig::default() };
    let mut best: Option<(f64, RigidPose)> = None;
    for rot in starts {
        let init = RigidPose::new(*rot, coarse_translation(sample, rot));
        let Ok(sol) = solve_weighted_best(sample, &init, &cfg) else { continue };
        let err = max_reprojection_error(sample, &sol.pose);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, sol.pose));
        }
        if err <= accept_px {
            break;
        }
    }
    best.map(|(_, p)| p)
}

fn inlier_mask(corrs: &CorrespondenceSet, pose: &RigidPose, inlier_px: f64) -> Vec<bool> {
    corrs
        .x
        .iter()
        .zip(&corrs.z)
        .map(|(x, z)| project(z, pose, &corrs.intrinsics).is_ok_and(|p| (x - p.uv).norm() <= inlier_px))
        .collect()
}

/// Hypothesise-and-verify PnP ignoring the weights, refined on the consensus set.
pub fn solve_ransac(corrs: &CorrespondenceSet, params: &RansacParams) -> Result<RansacSolution> {
    let n = corrs.len();
    let min_set = params.min_set.max(MIN_CORRESPONDENCES);
    if n < min_set {
        return Err(Error::InsufficientCorrespondences { required: min_set, actual: n });
    }
    if !(params.inlier_px > 0.0) || params.iters == 0 {
        return Err(Error::InvalidInput("RANSAC needs iters >= 1 and inlier_px > 0".into()));
    }
    let unit = corrs.with_weights(vec![Vector2::repeat(1.0); n]);
    let starts = cube_rotations();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, RigidPose)> = None;
    let mut needed = params.iters;
    let mut it = 0;
    while it < needed.min(params.iters) {
        it += 1;
        let idx = rand::seq::index::sample(&mut rng, n, min_set);
        let mut mask = vec![false; n];
        for i in idx.iter() {
            mask[i] = true;
        }
        let Some(pose) = minimal_pose(&unit.subset(&mask), params.inlier_px, &starts) else { continue };
        let count = inlier_mask(&unit, &pose, params.inlier_px).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, pose));
            let ratio = count as f64 / n as f64;
            if count == n {
                break;
            }
            let p_good = ratio.powi(min_set as i32);
            if p_good > 0.0 {
                let k = (1.0 - params.confidence).ln() / (1.0 - p_good).ln();
                needed = k.ceil().max(1.0) as usize;
            }
        }
    }
    let (count, mut pose) = best.ok_or(Error::NoConsensus { min_inliers: min_set })?;
    if count < min_set {
        return Err(Error::NoConsensus { min_inliers: min_set });
    }
    let cfg = SolverConfig::default();
    let mut mask = inlier_mask(&unit, &pose, params.inlier_px);
    for _ in 0..3 {
        if mask.iter().filter(|&&b| b).count() < min_set {
            return Err(Error::NoConsensus { min_inliers: min_set });
        }
        pose = solve_weighted_best(&unit.subset(&mask), &pose, &cfg)?.pose;
        let refined = inlier_mask(&unit, &pose, params.inlier_px);
        if refined == mask {
            break;
        }
        mask = refined;
    }
    Ok(RansacSolution { pose, inlier_mask: mask })
}
