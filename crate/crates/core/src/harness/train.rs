//! Toy descent on correspondences treated as free parameters.
//!
//! No network is involved: the 2D locations and weights of a scene are
//! updated directly by gradient descent under one of several losses, and
//! each step audits whether the 2D gradient moves every point towards its
//! noise-free projection.

use nalgebra::{DVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{represent, LocalPose6, PoseRepresentation, RigidPose};
use crate::harness::metrics::add_metrics;
use crate::harness::scene::SceneSample;
use crate::linearize::linearize_at;
use crate::loss::{corner_norm_mean, lc_loss, Distribution, LossConfig};
use crate::pnp::{flatten, solve_weighted_best, unflatten, CorrespondenceSet, SolverConfig};
use crate::robust::median_abs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Linear-covariance loss at the ground truth.
    #[serde(rename = "lc")]
    Lc,
    /// Corner distance of the solved pose, differentiated at the optimum.
    #[serde(rename = "bpnp")]
    BPnPStyle,
    /// `sum |r_i|_1` against the noise-free projections.
    #[serde(rename = "surrogate")]
    SurrogateOnly,
    /// Surrogate plus `beta` times the LC loss.
    #[serde(rename = "mixed")]
    Mixed,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lc => "lc",
            Self::BPnPStyle => "bpnp",
            Self::SurrogateOnly => "surrogate",
            Self::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lc" => Ok(Self::Lc),
            "bpnp" => Ok(Self::BPnPStyle),
            "surrogate" => Ok(Self::SurrogateOnly),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::InvalidInput(format!("unknown loss kind {s:?}"))),
        }
    }
}

/// Caps the gradient norm at `factor` times the median of the last
/// `window` raw norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub factor: f64,
    pub window: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { factor: 10.0, window: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct GradientClipper {
    cfg: ClipConfig,
    history: std::collections::VecDeque<f64>,
}

impl GradientClipper {
    pub fn new(cfg: ClipConfig) -> Self {
        Self { cfg, history: Default::default() }
    }

    /// Scales `g` in place and returns the factor applied.
    pub fn clip(&mut self, g: &mut DVector<f64>) -> f64 {
        let norm = g.norm();
        let mut scale = 1.0;
        if !self.history.is_empty() {
            let cap = self.cfg.factor * median_abs(self.history.make_contiguous());
            if norm > cap && norm > 0.0 {
                scale = cap / norm;
                *g *= scale;
            }
        }
        if self.cfg.window > 0 {
            if self.history.len() == self.cfg.window {
                self.history.pop_front();
            }
            self.history.push_back(norm);
        }
        scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub clip: ClipConfig,
    pub distribution: DistributionName,
    /// Weight on the LC term for [`LossKind::Mixed`].
    pub beta: f64,
    /// Weights are kept at or above this value.
    pub weight_floor: f64,
}

/// Serializable name of a [`Distribution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionName {
    #[default]
    Laplace,
    Gaussian,
}

impl From<DistributionName> for Distribution {
    fn from(d: DistributionName) -> Self {
        match d {
            DistributionName::Laplace => Distribution::Laplace,
            DistributionName::Gaussian => Distribution::Gaussian,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            clip: ClipConfig::default(),
            distribution: DistributionName::Laplace,
            beta: 0.02,
            weight_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!("lr {} must be positive", self.lr)));
        }
        if !(self.clip.factor > 0.0) {
            return Err(Error::InvalidInput("clip factor must be positive".into()));
        }
        if !(self.weight_floor >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidInput("weight_floor and beta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    /// NaN when every residual is zero.
    pub correctness: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub add: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// `steps + 1` records, the first for the initial state.
    pub records: Vec<TrainRecord>,
    pub final_corrs: CorrespondenceSet,
    /// Steps whose loss could not be evaluated.
    pub failures: usize,
}

impl TrainTrace {
    /// Mean correctness over the last `n` records that define it.
    pub fn tail_correctness(&self, n: usize) -> f64 {
        let tail: Vec<f64> =
            self.records.iter().rev().take(n).map(|r| r.correctness).filter(|c| c.is_finite()).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Fraction of points with a nonzero residual whose position moves closer
/// to `x_p` under `x - step * g`.
pub fn gradient_correctness(corrs: &CorrespondenceSet, grad_x: &[f64], x_p: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("step {step} must be positive")));
    }
    let n = corrs.len();
    if grad_x.len() != 2 * n || x_p.len() != 2 * n {
        return Err(Error::InvalidInput("gradient and target must have 2N entries".into()));
    }
    let (mut total, mut good) = (0usize, 0usize);
    for i in 0..n {
        let x = corrs.x[i];
        let p = Vector2::new(x_p[2 * i], x_p[2 * i + 1]);
        let before = (x - p).norm();
        if before == 0.0 {
            continue;
        }
        total += 1;
        let moved = x - Vector2::new(grad_x[2 * i], grad_x[2 * i + 1]) * step;
        if (moved - p).norm() < before {
            good += 1;
        }
    }
    if total == 0 {
        return Err(Error::AllResidualsZero);
    }
    Ok(good as f64 / total as f64)
}

/// A step small enough that the audit measures the gradient direction:
/// `1e-3 * median |r_i| / max |g_i|`.
pub fn probe_step(corrs: &CorrespondenceSet, grad_x: &[f64], x_p: &[f64]) -> f64 {
    let r: Vec<f64> = corrs.x.iter().zip(unflatten(x_p)).map(|(x, p)| (x - p).norm()).collect();
    let g_max = unflatten(grad_x).iter().map(|g| g.norm()).fold(0.0, f64::max);
    let r_med = median_abs(&r);
    if g_max > 0.0 && r_med > 0.0 {
        1e-3 * r_med / g_max
    } else {
        1.0
    }
}

/// A loss value with its flat `2N` gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_x: DVector<f64>,
    pub grad_w: DVector<f64>,
}

fn solver() -> SolverConfig {
    SolverConfig { max_iters: 50, step_tol: 1e-12, ..SolverConfig::default() }
}

fn lc_eval(corrs: &CorrespondenceSet, y_gt: &RigidPose, rep: &PoseRepresentation, dist: Distribution) -> Result<Evaluation> {
    let cfg = LossConfig { distribution: dist, ..LossConfig::new(*rep) };
    let out = lc_loss(corrs, y_gt, &cfg)?;
    Ok(Evaluation { loss: out.l_lc, grad_x: out.grad_x, grad_w: out.grad_w })
}

fn surrogate_eval(corrs: &CorrespondenceSet, x_p: &[f64]) -> Evaluation {
    let x = corrs.x_flat();
    let r: Vec<f64> = x.iter().zip(x_p).map(|(a, b)| a - b).collect();
    Evaluation {
        loss: r.iter().map(|v| v.abs()).sum(),
        grad_x: DVector::from_iterator(r.len(), r.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() })),
        grad_w: DVector::zeros(r.len()),
    }
}

// Differentiates the corner distance of the solved pose through the
// linearization at the optimum, where the normal-equation residual vanishes.
fn bpnp_eval(corrs: &CorrespondenceSet, y_gt: &RigidPose, rep: &PoseRepresentation) -> Result<Evaluation> {
    let sol = solve_weighted_best(corrs, y_gt, &solver())?;
    let lin = linearize_at(corrs, &sol.pose, None)?;
    let y_opt = represent(&LocalPose6::at(sol.pose), rep)?;
    let target = represent(&LocalPose6::at(*y_gt), rep)?;
    let d = &y_opt.values - &target.values;
    let group = rep.kind.group_size();
    let eps = 1e-12;
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let loss = corner_norm_mean(&sq, group, eps);
    let groups = (d.len() / group) as f64;
    let mut dl_dy = DVector::zeros(d.len());
    for (c, chunk) in sq.chunks_exact(group).enumerate() {
        let root = (chunk.iter().sum::<f64>() + eps).sqrt();
        for k in 0..group {
            dl_dy[c * group + k] = d[c * group + k] / (groups * root);
        }
    }
    let nu: Vector6<f64> = y_opt.jacobian.transpose() * dl_dy;
    let grad_x = lin.a.transpose() * nu;
    let p_nu = lin.hessian_inv * nu;
    let grad_w = DVector::from_iterator(
        lin.r_gt.len(),
        lin.jacobian.row_iter().enumerate().map(|(j, g)| lin.r_gt[j] * g.dot(&p_nu.transpose()) * lin.sq_weight_slopes[j]),
    );
    Ok(Evaluation { loss, grad_x, grad_w })
}

/// Loss of `kind` and its gradients; `x_p` are the noise-free projections
/// under `y_gt`, flat.
pub fn evaluate(
    kind: LossKind,
    corrs: &CorrespondenceSet,
    y_gt: &RigidPose,
    rep: &PoseRepresentation,
    x_p: &[f64],
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let dist = cfg.distribution.into();
    match kind {
        LossKind::Lc => lc_eval(corrs, y_gt, rep, dist),
        LossKind::BPnPStyle => bpnp_eval(corrs, y_gt, rep),
        LossKind::SurrogateOnly => Ok(surrogate_eval(corrs, x_p)),
        LossKind::Mixed => {
            let lc = lc_eval(corrs, y_gt, rep, dist)?;
            let s = surrogate_eval(corrs, x_p);
            Ok(Evaluation {
                loss: s.loss + cfg.beta * lc.loss,
                grad_x: s.grad_x + lc.grad_x * cfg.beta,
                grad_w: s.grad_w + lc.grad_w * cfg.beta,
            })
        }
    }
}

fn pose_record(step: usize, loss: f64, correctness: f64, corrs: &CorrespondenceSet, scene: &SceneSample) -> TrainRecord {
    let solved = solve_weighted_best(corrs, &scene.y_gt, &solver()).map(|s| s.pose);
    let (rot_err_deg, trans_err, add) = match solved {
        Ok(pose) => {
            let add = add_metrics(&pose, &scene.y_gt, &scene.model_points, scene.diameter(), false)
                .map(|m| m.add)
                .unwrap_or(f64::NAN);
            (pose.rotation_error_deg(&scene.y_gt), pose.translation_error(&scene.y_gt), add)
        }
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    TrainRecord { step, loss, correctness, rot_err_deg, trans_err, add }
}

/// Gradient descent on `(x, w)` of `scene`, with one shared learning rate
/// and a joint clipped gradient. A step whose loss fails reuses the
/// previous clipped gradient.
pub fn toy_train(scene: &SceneSample, kind: LossKind, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let rep = PoseRepresentation::corners3d(scene.bbox);
    let x_p = flatten(&scene.clean_points());
    let mut corrs = scene.corrs.clone();
    let mut clipper = GradientClipper::new(cfg.clip);
    let mut previous: Option<DVector<f64>> = None;
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut failures = 0;
    let n2 = 2 * corrs.len();

    for step in 0..=cfg.steps {
        let update = match evaluate(kind, &corrs, &scene.y_gt, &rep, &x_p, cfg) {
            Ok(eval) => {
                let gx = eval.grad_x.as_slice();
                let correctness = gradient_correctness(&corrs, gx, &x_p, probe_step(&corrs, gx, &x_p)).unwrap_or(f64::NAN);
                records.push(pose_record(step, eval.loss, correctness, &corrs, scene));
                let mut g = DVector::zeros(2 * n2);
                g.rows_mut(0, n2).copy_from(&eval.grad_x);
                g.rows_mut(n2, n2).copy_from(&eval.grad_w);
                clipper.clip(&mut g);
                previous = Some(g.clone());
                Some(g)
            }
            Err(_) => {
                failures += 1;
                records.push(pose_record(step, f64::NAN, f64::NAN, &corrs, scene));
                previous.clone()
            }
        };
        if step == cfg.steps {
            break;
        }
        let Some(g) = update else { continue };
        let mut x = corrs.x_flat();
        let mut w = corrs.w_flat();
        for i in 0..n2 {
            x[i] -= cfg.lr * g[i];
            w[i] = (w[i] - cfg.lr * g[n2 + i]).max(cfg.weight_floor);
        }
        corrs = corrs.with_points(unflatten(&x)).with_weights(unflatten(&w));
    }
    Ok(TrainTrace { records, final_corrs: corrs, failures })
}

/// Pose of the final correspondences against the ground truth, solved from
/// the ground truth.
pub fn final_pose_error(trace: &TrainTrace, scene: &SceneSample) -> Result<(f64, f64)> {
    let pose: RigidPose = solve_weighted_best(&trace.final_corrs, &scene.y_gt, &solver())?.pose;
    Ok((pose.rotation_error_deg(&scene.y_gt), pose.translation_error(&scene.y_gt)))
}
