//! One function per subcommand. Options are parsed, and the input read and
//! validated, before any computation runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lcpnp::covariance::{pose_cov, relative_frobenius};
use lcpnp::encoding::{allocate_bits, encode_component, ComponentCodec};
use lcpnp::harness::{
    averaging_demo, evaluate, gen_scene, gradient_correctness, monte_carlo_pose_cov, probe_step, toy_train,
    ClipConfig, DistributionName, LossKind, SceneConfig, TrainConfig,
};
use lcpnp::pnp::{flatten, solve_weighted_best};
use lcpnp::{
    lc_loss, linearize_at_gt, solve_ransac, HuberConfig, LossConfig, PoseRepresentation, RansacParams,
    RepresentationKind, SolverConfig,
};
use nalgebra::{DVector, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::io::{emit, json_bytes, read_scene, trace_csv, write_atomic, PoseDoc, Scene, SceneDoc};
use crate::options::{parse, split_off};

pub struct Invocation {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub options: Map<String, Value>,
}

fn input_scene(ctx: &Invocation) -> Result<Scene> {
    let path = ctx.input.as_deref().context("this subcommand needs --input")?;
    read_scene(path)
}

fn matrix_rows(m: &Matrix6<f64>) -> Vec<[f64; 6]> {
    (0..6).map(|i| std::array::from_fn(|j| m[(i, j)])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Init {
    #[default]
    Ransac,
    Gt,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SolveOptions {
    init: Init,
    max_iters: usize,
    step_tol: f64,
    damping_init: f64,
    huber_delta: Option<f64>,
    ransac_iters: usize,
    inlier_px: f64,
    confidence: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        let s = SolverConfig::default();
        let r = RansacParams::default();
        Self {
            init: Init::Ransac,
            max_iters: s.max_iters,
            step_tol: s.step_tol,
            damping_init: s.damping_init,
            huber_delta: s.huber_delta,
            ransac_iters: r.iters,
            inlier_px: r.inlier_px,
            confidence: r.confidence,
        }
    }
}

#[derive(Serialize)]
struct SolveReport {
    pose: PoseDoc,
    iters: usize,
    final_nll: f64,
    converged: bool,
    inliers: Option<usize>,
    inlier_mask: Option<Vec<bool>>,
    rot_err_deg: Option<f64>,
    trans_err: Option<f64>,
}

pub fn solve(ctx: Invocation) -> Result<()> {
    let opts: SolveOptions = parse(ctx.options.clone())?;
    let scene = input_scene(&ctx)?;
    let cfg = SolverConfig {
        max_iters: opts.max_iters,
        step_tol: opts.step_tol,
        damping_init: opts.damping_init,
        huber_delta: opts.huber_delta,
    };
    cfg.validate()?;
    let (init, mask) = match opts.init {
        Init::Gt => (scene.require_gt()?, None),
        Init::Ransac => {
            let params = RansacParams {
                iters: opts.ransac_iters,
                inlier_px: opts.inlier_px,
                confidence: opts.confidence,
                seed: ctx.seed.unwrap_or(0),
                ..RansacParams::default()
            };
            let r = solve_ransac(&scene.corrs, &params)?;
            (r.pose, Some(r.inlier_mask))
        }
    };
    let corrs = match &mask {
        Some(m) => scene.corrs.subset(m),
        None => scene.corrs.clone(),
    };
    let sol = solve_weighted_best(&corrs, &init, &cfg)?;
    let report = SolveReport {
        pose: PoseDoc::from_pose(&sol.pose),
        iters: sol.iters,
        final_nll: sol.final_nll,
        converged: sol.converged,
        inliers: mask.as_ref().map(|m| m.iter().filter(|&&b| b).count()),
        inlier_mask: mask,
        rot_err_deg: scene.gt.map(|g| sol.pose.rotation_error_deg(&g)),
        trans_err: scene.gt.map(|g| sol.pose.translation_error(&g)),
    };
    emit(ctx.output.as_deref(), &json_bytes(&report)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RepresentationName {
    #[default]
    Corners3d,
    Corners2d,
    Quaternion,
    AxisAngle,
    TwoColumn,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum HuberOption {
    Named(String),
    Delta(f64),
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossOptions {
    representation: RepresentationName,
    distribution: DistributionName,
    sqrt_eps: f64,
    /// `"none"`, `"adaptive"` or a fixed threshold.
    huber: Option<HuberOption>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            representation: RepresentationName::Corners3d,
            distribution: DistributionName::Laplace,
            sqrt_eps: 1e-12,
            huber: None,
        }
    }
}

impl LossOptions {
    fn config(&self, scene: &Scene) -> Result<LossConfig> {
        let kind = match self.representation {
            RepresentationName::Corners3d => RepresentationKind::Corners3D,
            RepresentationName::Corners2d => RepresentationKind::Corners2D(scene.corrs.intrinsics),
            RepresentationName::Quaternion => RepresentationKind::QuaternionTrans,
            RepresentationName::AxisAngle => RepresentationKind::AxisAngleTrans,
            RepresentationName::TwoColumn => RepresentationKind::TwoColumnTrans,
        };
        if kind.needs_bbox() && scene.bbox.is_none() {
            bail!("representation {} needs a bbox in the input", kind.name());
        }
        let huber = match &self.huber {
            None => None,
            Some(HuberOption::Named(s)) if s == "none" => None,
            Some(HuberOption::Named(s)) if s == "adaptive" => Some(HuberConfig::default()),
            Some(HuberOption::Named(s)) => bail!("huber must be none, adaptive or a number, got {s:?}"),
            Some(HuberOption::Delta(d)) if *d > 0.0 => Some(HuberConfig::Fixed { delta: *d }),
            Some(HuberOption::Delta(d)) => bail!("huber threshold {d} must be positive"),
        };
        Ok(LossConfig {
            representation: PoseRepresentation::new(kind, scene.bbox),
            distribution: self.distribution.into(),
            sqrt_eps: self.sqrt_eps,
            huber,
        })
    }
}

#[derive(Serialize)]
pub struct LossReport {
    pub e_cov: f64,
    pub e_prior: f64,
    pub e_linear: f64,
    pub l_lc: f64,
    pub grad_w: Vec<f64>,
    pub grad_x: Vec<f64>,
}

pub fn loss(ctx: Invocation) -> Result<()> {
    let opts: LossOptions = parse(ctx.options.clone())?;
    let scene = input_scene(&ctx)?;
    let cfg = opts.config(&scene)?;
    let gt = scene.require_gt()?;
    let out = lc_loss(&scene.corrs, &gt, &cfg)?;
    let report = LossReport {
        e_cov: out.e_cov,
        e_prior: out.e_prior,
        e_linear: out.e_linear,
        l_lc: out.l_lc,
        grad_w: out.grad_w.as_slice().to_vec(),
        grad_x: out.grad_x.as_slice().to_vec(),
    };
    emit(ctx.output.as_deref(), &json_bytes(&report)?)
}

const SCENE_KEYS: [&str; 7] =
    ["n_points", "bbox_half_extents", "intrinsics", "noise_px", "outlier_frac", "depth_range", "seed"];

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateOptions {
    loss: LossKind,
    steps: usize,
    lr: f64,
    clip: ClipConfig,
    distribution: DistributionName,
    beta: f64,
    weight_floor: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: LossKind::Lc,
            steps: t.steps,
            lr: t.lr,
            clip: t.clip,
            distribution: t.distribution,
            beta: t.beta,
            weight_floor: t.weight_floor,
        }
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    loss: &'static str,
    seed: u64,
    steps: usize,
    lr: f64,
    failures: usize,
    tail_correctness: f64,
    initial_rot_err_deg: f64,
    final_rot_err_deg: f64,
    initial_trans_err: f64,
    final_trans_err: f64,
}

pub fn simulate(ctx: Invocation, scene_out: Option<&Path>, summary: Option<&Path>) -> Result<()> {
    let mut options = ctx.options.clone();
    let scene_map = split_off(&mut options, &SCENE_KEYS);
    let mut scene_cfg: SceneConfig = parse(scene_map)?;
    let opts: SimulateOptions = parse(options)?;
    if let Some(seed) = ctx.seed {
        scene_cfg.seed = seed;
    }
    let train = TrainConfig {
        steps: opts.steps,
        lr: opts.lr,
        clip: opts.clip,
        distribution: opts.distribution,
        beta: opts.beta,
        weight_floor: opts.weight_floor,
    };
    train.validate()?;
    let scene = gen_scene(&scene_cfg)?;
    let trace = toy_train(&scene, opts.loss, &train)?;

    if let Some(path) = scene_out {
        write_atomic(path, &json_bytes(&SceneDoc::from_sample(&scene))?)?;
    }
    emit(ctx.output.as_deref(), trace_csv(&trace).as_bytes())?;
    if let Some(path) = summary {
        let (first, last) = (trace.records[0], *trace.records.last().expect("initial record"));
        let s = SimulateSummary {
            loss: opts.loss.name(),
            seed: scene_cfg.seed,
            steps: train.steps,
            lr: train.lr,
            failures: trace.failures,
            tail_correctness: trace.tail_correctness(100),
            initial_rot_err_deg: first.rot_err_deg,
            final_rot_err_deg: last.rot_err_deg,
            initial_trans_err: first.trans_err,
            final_trans_err: last.trans_err,
        };
        write_atomic(path, &json_bytes(&s)?)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorrectnessOptions {
    loss: LossKind,
    distribution: DistributionName,
    /// Fixed audit step; by default a probe scaled to the residuals.
    step: Option<f64>,
}

impl Default for CorrectnessOptions {
    fn default() -> Self {
        Self { loss: LossKind::Lc, distribution: DistributionName::Laplace, step: None }
    }
}

#[derive(Serialize)]
struct CorrectnessReport {
    loss: &'static str,
    correctness: f64,
    step: f64,
    loss_value: f64,
}

pub fn correctness(ctx: Invocation) -> Result<()> {
    let opts: CorrectnessOptions = parse(ctx.options.clone())?;
    let scene = input_scene(&ctx)?;
    let gt = scene.require_gt()?;
    let rep = PoseRepresentation::corners3d(scene.require_bbox()?);
    let x_p = flatten(&scene.corrs.projections(&gt)?);
    let train = TrainConfig { distribution: opts.distribution, ..TrainConfig::default() };
    let eval = evaluate(opts.loss, &scene.corrs, &gt, &rep, &x_p, &train)?;
    let gx = eval.grad_x.as_slice();
    let step = opts.step.unwrap_or_else(|| probe_step(&scene.corrs, gx, &x_p));
    let c = gradient_correctness(&scene.corrs, gx, &x_p, step)?;
    let report = CorrectnessReport { loss: opts.loss.name(), correctness: c, step, loss_value: eval.loss };
    emit(ctx.output.as_deref(), &json_bytes(&report)?)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct McOptions {
    samples: usize,
    sigma: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { samples: 2000, sigma: 0.5 }
    }
}

#[derive(Serialize)]
struct McReport {
    samples: usize,
    used: usize,
    skipped: usize,
    sigma: f64,
    relative_frobenius: f64,
    monte_carlo: Vec<[f64; 6]>,
    analytic: Vec<[f64; 6]>,
}

pub fn mc_cov(ctx: Invocation) -> Result<()> {
    let opts: McOptions = parse(ctx.options.clone())?;
    let scene = input_scene(&ctx)?;
    let sample = scene.to_sample()?;
    let mc = monte_carlo_pose_cov(&sample, opts.sigma, opts.samples, ctx.seed.unwrap_or(0))?;
    let lin = linearize_at_gt(&sample.corrs, &sample.y_gt)?;
    let analytic = pose_cov(&lin.a, &DVector::repeat(lin.r_gt.len(), opts.sigma * opts.sigma));
    let report = McReport {
        samples: opts.samples,
        used: mc.used,
        skipped: mc.skipped,
        sigma: opts.sigma,
        relative_frobenius: relative_frobenius(&mc.cov, &analytic),
        monte_carlo: matrix_rows(&mc.cov),
        analytic: matrix_rows(&analytic),
    };
    emit(ctx.output.as_deref(), &json_bytes(&report)?)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EncodeOptions {
    bits: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { bits: 8 }
    }
}

#[derive(Serialize)]
struct EncodeReport {
    bits: [usize; 3],
    /// Per object point, one MSB-first bit string per axis.
    codes: Vec<[String; 3]>,
}

pub fn encode(ctx: Invocation) -> Result<()> {
    let opts: EncodeOptions = parse(ctx.options.clone())?;
    let scene = input_scene(&ctx)?;
    let bbox = scene.require_bbox()?;
    let (lo, hi) = (bbox.min(), bbox.max());
    let bits = allocate_bits([hi.x - lo.x, hi.y - lo.y, hi.z - lo.z], opts.bits)?;
    let codecs: Vec<ComponentCodec> =
        (0..3).map(|k| ComponentCodec::new(lo[k], hi[k], bits[k])).collect::<lcpnp::Result<_>>()?;
    let codes = scene
        .corrs
        .z
        .iter()
        .map(|p| -> Result<[String; 3]> {
            let mut out: [String; 3] = Default::default();
            for k in 0..3 {
                let b = encode_component(p[k], &codecs[k])?;
                out[k] = b.iter().map(|&v| if v { '1' } else { '0' }).collect();
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    emit(ctx.output.as_deref(), &json_bytes(&EncodeReport { bits, codes })?)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AveragingOptions {
    a_hats: [f64; 2],
    a: f64,
    /// When positive, sweeps this many random straddling pairs instead.
    trials: usize,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        Self { a_hats: [0.4, 0.8], a: 0.5, trials: 0 }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum AveragingReport {
    Single { a_hats: [f64; 2], a: f64, grads: [f64; 2], correct: [bool; 2] },
    Sweep { trials: usize, exactly_one_incorrect: usize },
}

pub fn demo_averaging(ctx: Invocation) -> Result<()> {
    let opts: AveragingOptions = parse(ctx.options.clone())?;
    let report = if opts.trials == 0 {
        let r = averaging_demo(opts.a_hats, opts.a);
        AveragingReport::Single { a_hats: opts.a_hats, a: opts.a, grads: r.grads, correct: r.correct }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.unwrap_or(0));
        let mut hits = 0;
        for _ in 0..opts.trials {
            let a = rng.random_range(-1.0..1.0);
            let below = a - rng.random_range(1e-3..1.0);
            let above = a + rng.random_range(1e-3..1.0);
            let r = averaging_demo([below, above], a);
            if r.grads[0] != 0.0 && r.correct.iter().filter(|&&c| !c).count() == 1 {
                hits += 1;
            }
        }
        AveragingReport::Sweep { trials: opts.trials, exactly_one_incorrect: hits }
    };
    emit(ctx.output.as_deref(), &json_bytes(&report)?)
}
