//! Scene interchange documents, CSV traces and atomic output.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lcpnp::harness::{SceneSample, TrainTrace};
use lcpnp::{BoundingBox, CameraIntrinsics, CorrespondenceSet, RigidPose};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointDoc {
    pub x: [f64; 2],
    pub z: [f64; 3],
    #[serde(default = "unit_weight")]
    pub w: [f64; 2],
}

fn unit_weight() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDoc {
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseDoc {
    pub fn from_pose(p: &RigidPose) -> Self {
        let r = p.rotation;
        Self {
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }

    pub fn to_pose(&self) -> Result<RigidPose> {
        let pose = RigidPose::new(Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation));
        if !pose.is_valid() {
            bail!("gt_pose.rotation is not a rotation (orthonormality error {:.3e})", pose.orthonormality_error());
        }
        Ok(pose)
    }
}

/// A single correspondence scene with optional ground truth and box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub intrinsics: CameraIntrinsics,
    pub points: Vec<PointDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[[f64; 3]; 8]>,
}

/// A document that passed validation.
#[derive(Debug, Clone)]
pub struct Scene {
    pub corrs: CorrespondenceSet,
    pub gt: Option<RigidPose>,
    pub bbox: Option<BoundingBox>,
}

impl Scene {
    pub fn require_gt(&self) -> Result<RigidPose> {
        self.gt.context("the input has no gt_pose")
    }

    pub fn require_bbox(&self) -> Result<BoundingBox> {
        self.bbox.context("the input has no bbox")
    }

    /// Harness view of the scene: the object points double as the metric cloud.
    pub fn to_sample(&self) -> Result<SceneSample> {
        let y_gt = self.require_gt()?;
        let bbox = match self.bbox {
            Some(b) => b,
            None => bounding(&self.corrs.z)?,
        };
        Ok(SceneSample {
            corrs: self.corrs.clone(),
            y_gt,
            bbox,
            model_points: self.corrs.z.clone(),
            outlier_mask: vec![false; self.corrs.len()],
        })
    }
}

fn bounding(z: &[Vector3<f64>]) -> Result<BoundingBox> {
    let min = z.iter().fold(Vector3::repeat(f64::MAX), |m, p| m.inf(p));
    let max = z.iter().fold(Vector3::repeat(f64::MIN), |m, p| m.sup(p));
    if (max - min).iter().any(|d| d.is_nan() || *d <= 0.0) {
        bail!("object points are flat; supply a bbox");
    }
    Ok(BoundingBox::from_min_max(min, max))
}

impl SceneDoc {
    pub fn from_sample(s: &SceneSample) -> Self {
        let c = &s.corrs;
        Self {
            intrinsics: c.intrinsics,
            points: (0..c.len())
                .map(|i| PointDoc { x: [c.x[i].x, c.x[i].y], z: [c.z[i].x, c.z[i].y, c.z[i].z], w: [c.w[i].x, c.w[i].y] })
                .collect(),
            gt_pose: Some(PoseDoc::from_pose(&s.y_gt)),
            bbox: Some(s.bbox.corners.map(|p| [p.x, p.y, p.z])),
        }
    }

    pub fn validate(&self) -> Result<Scene> {
        let x = self.points.iter().map(|p| Vector2::from(p.x)).collect();
        let z = self.points.iter().map(|p| Vector3::from(p.z)).collect();
        let w = self.points.iter().map(|p| Vector2::from(p.w)).collect();
        let corrs = CorrespondenceSet::new(x, z, w, self.intrinsics)?;
        let gt = self.gt_pose.as_ref().map(PoseDoc::to_pose).transpose()?;
        let bbox = self.bbox.map(|b| BoundingBox::from_corners(b.map(Vector3::from))).transpose()?;
        Ok(Scene { corrs, gt, bbox })
    }
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: SceneDoc = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    doc.validate().with_context(|| format!("validating {}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Sends `bytes` to `path`, or to stdout without one.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("step,loss,correctness,rot_err_deg,trans_err,add\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            fmt_f64(r.loss),
            fmt_f64(r.correctness),
            fmt_f64(r.rot_err_deg),
            fmt_f64(r.trans_err),
            fmt_f64(r.add)
        ));
    }
    out
}
