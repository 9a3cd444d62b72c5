//! Seeded synthetic scenes.

use nalgebra::{UnitQuaternion, Vector2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CameraIntrinsics, RigidPose, DEPTH_EPS};
use crate::pnp::{CorrespondenceSet, MIN_CORRESPONDENCES};

/// Rejection-sampling budget for placing the object in view.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Points in the cloud used by the ADD metrics.
pub const MODEL_POINTS: usize = 256;
/// Outlier displacement range in pixels.
pub const OUTLIER_SHIFT_PX: (f64, f64) = (20.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_points: usize,
    pub bbox_half_extents: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    /// Per-axis standard deviation of the 2D noise.
    pub noise_px: f64,
    pub outlier_frac: f64,
    /// Depth range of the object center.
    pub depth_range: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 64,
            bbox_half_extents: [0.1, 0.08, 0.06],
            intrinsics: CameraIntrinsics { fx: 572.4, fy: 573.6, cx: 320.0, cy: 240.0 },
            noise_px: 2.0,
            outlier_frac: 0.0,
            depth_range: [0.8, 1.5],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.n_points < MIN_CORRESPONDENCES {
            return Err(Error::InsufficientCorrespondences { required: MIN_CORRESPONDENCES, actual: self.n_points });
        }
        if !(self.noise_px >= 0.0) || !self.noise_px.is_finite() {
            return Err(Error::InvalidInput(format!("noise_px {} must be non-negative", self.noise_px)));
        }
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return Err(Error::OutOfRange { value: self.outlier_frac, min: 0.0, max: 1.0 });
        }
        if self.bbox_half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidInput("bbox half extents must be positive".into()));
        }
        let [near, far] = self.depth_range;
        let max_half = self.bbox_half_extents.iter().copied().fold(0.0, f64::max);
        if !(near > 0.0 && far >= near) || near <= 2.0 * max_half {
            return Err(Error::InvalidInput(format!("depth range [{near}, {far}] too close for the object")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Noisy observations with unit weights.
    pub corrs: CorrespondenceSet,
    pub y_gt: RigidPose,
    pub bbox: BoundingBox,
    pub model_points: Vec<Vector3<f64>>,
    pub outlier_mask: Vec<bool>,
}

impl SceneSample {
    /// Noise-free projections `x_p` under the ground truth.
    pub fn clean_points(&self) -> Vec<Vector2<f64>> {
        self.corrs.projections(&self.y_gt).expect("scene points are in front of the camera")
    }

    pub fn diameter(&self) -> f64 {
        self.bbox.diameter()
    }
}

fn uniform_in_box(rng: &mut ChaCha8Rng, h: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(rng.random_range(-h.x..=h.x), rng.random_range(-h.y..=h.y), rng.random_range(-h.z..=h.z))
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q = Vector4::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
        if q.norm() > 1e-6 {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q));
            return q.to_rotation_matrix().into_inner();
        }
    }
}

pub fn gen_scene(cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = Vector3::from(cfg.bbox_half_extents);
    let bbox = BoundingBox::from_half_extents(h);
    let k = cfg.intrinsics;
    let z: Vec<Vector3<f64>> = (0..cfg.n_points).map(|_| uniform_in_box(&mut rng, &h)).collect();
    let model_points: Vec<Vector3<f64>> = (0..MODEL_POINTS).map(|_| uniform_in_box(&mut rng, &h)).collect();

    let (width, height) = (2.0 * k.cx, 2.0 * k.cy);
    let mut y_gt = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let rotation = uniform_rotation(&mut rng);
        let depth = rng.random_range(cfg.depth_range[0]..=cfg.depth_range[1]);
        // object center projects into the central half of the image
        let u = rng.random_range(0.25 * width..=0.75 * width);
        let v = rng.random_range(0.25 * height..=0.75 * height);
        let t = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        let pose = RigidPose::new(rotation, t);
        let visible = bbox.corners.iter().chain(&z).all(|p| {
            let c = pose.transform(p);
            c.z > DEPTH_EPS && {
                let uv = k.project_camera_point(&c).map(|(uv, _)| uv);
                uv.is_ok_and(|uv| (0.0..=width).contains(&uv.x) && (0.0..=height).contains(&uv.y))
            }
        });
        if visible {
            y_gt = Some(pose);
            break;
        }
    }
    let y_gt = y_gt.ok_or(Error::FrustumFailure(MAX_PLACEMENT_ATTEMPTS))?;

    let clean = CorrespondenceSet::unweighted(vec![Vector2::zeros(); z.len()], z.clone(), k)?.projections(&y_gt)?;
    let noise = Normal::new(0.0, cfg.noise_px).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut x: Vec<Vector2<f64>> = clean
        .iter()
        .map(|p| if cfg.noise_px > 0.0 { p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)) } else { *p })
        .collect();

    let n_out = (cfg.outlier_frac * cfg.n_points as f64).round() as usize;
    let mut outlier_mask = vec![false; cfg.n_points];
    for i in sample(&mut rng, cfg.n_points, n_out).into_vec() {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let shift = rng.random_range(OUTLIER_SHIFT_PX.0..=OUTLIER_SHIFT_PX.1);
        x[i] += Vector2::new(angle.cos(), angle.sin()) * shift;
        outlier_mask[i] = true;
    }

    Ok(SceneSample { corrs: CorrespondenceSet::unweighted(x, z, k)?, y_gt, bbox, model_points, outlier_mask })
}
