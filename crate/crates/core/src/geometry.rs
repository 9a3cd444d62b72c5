//! Pinhole camera, rigid poses, the 6D local chart and pose representations.
//!
//! All calculus in the crate happens in one chart: a pose is written as a
//! left-multiplicative axis-angle increment on a reference rotation plus an
//! additive translation increment,
//!
//! ```text
//! R = exp([omega]x) * R_ref,   t = t_ref + tau
//! ```
//!
//! and every Jacobian (projection, representation, linearization) is taken
//! with respect to the stacked increment `(omega, tau)`.

use nalgebra::{
    DVector, Dyn, Matrix2x3, Matrix3, OMatrix, Rotation3, SMatrix, UnitQuaternion, Vector2,
    Vector3, Vector4, U6,
};

use crate::error::{Error, Result};

/// Points must be at least this far in front of the camera to be projected.
pub const DEPTH_EPS: f64 = 1e-6;

/// `log_so3` refuses rotations whose angle is within this margin of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// 2x6 Jacobian of a projection with respect to the local pose increment.
pub type PoseJacobian = SMatrix<f64, 2, 6>;

/// Pinhole intrinsics without skew or distortion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Projects a point already expressed in the camera frame.
    ///
    /// Returns the pixel and the 2x3 derivative of the pixel with respect
    /// to the camera-frame point.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let depth = p.z;
        if depth <= DEPTH_EPS {
            return Err(Error::NonPositiveDepth { depth, eps: DEPTH_EPS });
        }
        let inv_z = 1.0 / depth;
        let xn = p.x * inv_z;
        let yn = p.y * inv_z;
        let uv = Vector2::new(self.fx * xn + self.cx, self.fy * yn + self.cy);
        let d = Matrix2x3::new(
            self.fx * inv_z,
            0.0,
            -self.fx * xn * inv_z,
            0.0,
            self.fy * inv_z,
            -self.fy * yn * inv_z,
        );
        Ok((uv, d))
    }
}

/// Rotation plus translation mapping object coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// `T(p; R, t) = R p + t`.
    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies a local increment: `exp(omega) R`, `t + tau`.
    pub fn retract(&self, omega: &Vector3<f64>, tau: &Vector3<f64>) -> Self {
        Self::new(exp_so3(omega) * self.rotation, self.translation + tau)
    }

    /// Applies a stacked `(omega, tau)` increment.
    pub fn retract6(&self, delta: &nalgebra::Vector6<f64>) -> Self {
        self.retract(&delta.fixed_rows::<3>(0).into_owned(), &delta.fixed_rows::<3>(3).into_owned())
    }

    /// Increment `d` with `reference.retract6(d) == self`.
    pub fn local_from(&self, reference: &RigidPose) -> Result<nalgebra::Vector6<f64>> {
        let omega = log_so3(&(self.rotation * reference.rotation.transpose()))?;
        let tau = self.translation - reference.translation;
        Ok(nalgebra::Vector6::new(omega.x, omega.y, omega.z, tau.x, tau.y, tau.z))
    }

    /// `max |R^T R - I|`, used to check the orthonormality invariant.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_error() < 1e-9
            && (self.rotation.determinant() - 1.0).abs() < 1e-9
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Geodesic rotation distance to `other`, in degrees.
    pub fn rotation_error_deg(&self, other: &RigidPose) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(&(rel - rel.transpose())).norm() * 0.5;
        s.atan2(c).to_degrees()
    }

    pub fn translation_error(&self, other: &RigidPose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// A pose expressed as an increment on a reference pose in the 6D chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPose6 {
    pub omega: Vector3<f64>,
    pub tau: Vector3<f64>,
    pub reference: RigidPose,
}

impl LocalPose6 {
    pub fn at(reference: RigidPose) -> Self {
        Self { omega: Vector3::zeros(), tau: Vector3::zeros(), reference }
    }

    pub fn from_vector(delta: &nalgebra::Vector6<f64>, reference: RigidPose) -> Self {
        Self {
            omega: delta.fixed_rows::<3>(0).into_owned(),
            tau: delta.fixed_rows::<3>(3).into_owned(),
            reference,
        }
    }

    pub fn as_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(self.omega.x, self.omega.y, self.omega.z, self.tau.x, self.tau.y, self.tau.z)
    }

    pub fn to_pose(&self) -> RigidPose {
        self.reference.retract(&self.omega, &self.tau)
    }
}

#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

/// Rodrigues' formula.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coeffs(omega.norm());
    let k = hat(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`exp_so3`] for rotation angles below `pi - NEAR_PI_MARGIN`.
pub fn log_so3(rotation: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let axis2 = vee(&(rotation - rotation.transpose()));
    let s = axis2.norm() * 0.5;
    let c = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(Error::NearPiRotation { angle: theta });
    }
    let scale = if theta < 1e-4 {
        0.5 * (1.0 + theta * theta / 6.0 + 7.0 * theta.powi(4) / 360.0)
    } else {
        0.5 * theta / s
    };
    Ok(axis2 * scale)
}

/// Left Jacobian of SO(3): `exp(omega + d) ~ exp(J_l(omega) d) exp(omega)`.
pub fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coeffs(omega.norm());
    let k = hat(omega);
    Matrix3::identity() + k * b + k * k * c
}

pub fn left_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let coeff = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        1.0 / (theta * theta) - (1.0 + c) / (2.0 * theta * s)
    };
    Matrix3::identity() - k * 0.5 + k * k * coeff
}

/// Pixel location of one point together with its two Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vector2<f64>,
    /// Derivative with respect to the local increment `(omega, tau)` at the pose.
    pub j_pose: PoseJacobian,
    /// Derivative with respect to the object point.
    pub j_point: Matrix2x3<f64>,
}

/// Perspective projection `pi(z, pose)` and its Jacobians.
pub fn project(z: &Vector3<f64>, pose: &RigidPose, k: &CameraIntrinsics) -> Result<Projection> {
    let rotated = pose.rotation * z;
    let (uv, d) = k.project_camera_point(&(rotated + pose.translation))?;
    let mut j_pose = PoseJacobian::zeros();
    // d(exp(w) q)/dw at w = 0 is -[q]x.
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-d * hat(&rotated)));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d);
    Ok(Projection { uv, j_pose, j_point: d * pose.rotation })
}

/// Eight corners of an axis-aligned object box.
///
/// Corner `i` takes the max value on axis x when bit 2 of `i` is set, on y
/// for bit 1 and on z for bit 0; otherwise the min value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub corners: [Vector3<f64>; 8],
}

impl BoundingBox {
    pub fn from_min_max(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        let corners = std::array::from_fn(|i| {
            Vector3::new(
                if i & 4 != 0 { max.x } else { min.x },
                if i & 2 != 0 { max.y } else { min.y },
                if i & 1 != 0 { max.z } else { min.z },
            )
        });
        Self { corners }
    }

    pub fn from_half_extents(h: Vector3<f64>) -> Self {
        Self::from_min_max(-h, h)
    }

    /// Accepts corners in any order as long as they form a box.
    pub fn from_corners(corners: [Vector3<f64>; 8]) -> Result<Self> {
        let bbox = Self { corners };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn min(&self) -> Vector3<f64> {
        self.corners.iter().fold(Vector3::repeat(f64::INFINITY), |m, c| m.inf(c))
    }

    pub fn max(&self) -> Vector3<f64> {
        self.corners.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Checks that every axis takes exactly two distinct values over the
    /// corners and that all eight min/max combinations appear.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.min(), self.max());
        for a in 0..3 {
            if !(hi[a] > lo[a]) {
                return Err(Error::InvalidInput(format!("bounding box is flat along axis {a}")));
            }
        }
        let mut seen = [false; 8];
        for c in &self.corners {
            let mut code = 0;
            for a in 0..3 {
                let bit = if c[a] == hi[a] {
                    1
                } else if c[a] == lo[a] {
                    0
                } else {
                    return Err(Error::InvalidInput("bounding box corner is not on the box".into()));
                };
                code |= bit << (2 - a);
            }
            seen[code] = true;
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::InvalidInput("bounding box corners do not cover all eight combinations".into()))
        }
    }

    pub fn diameter(&self) -> f64 {
        (self.max() - self.min()).norm()
    }
}

/// Which vector the 6D pose is mapped to before the loss is reduced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RepresentationKind {
    /// Transformed box corners, 8 x 3 values.
    Corners3D,
    /// Projected box corners, 8 x 2 values.
    Corners2D(CameraIntrinsics),
    /// Unit quaternion `(w, x, y, z)` plus translation.
    QuaternionTrans,
    /// Axis-angle vector plus translation.
    AxisAngleTrans,
    /// First two rotation columns plus translation.
    TwoColumnTrans,
}

impl RepresentationKind {
    pub fn dim(&self) -> usize {
        match self {
            Self::Corners3D => 24,
            Self::Corners2D(_) => 16,
            Self::QuaternionTrans => 7,
            Self::AxisAngleTrans => 6,
            Self::TwoColumnTrans => 9,
        }
    }

    /// Number of consecutive entries reduced together by the loss.
    pub fn group_size(&self) -> usize {
        match self {
            Self::Corners3D => 3,
            Self::Corners2D(_) => 2,
            other => other.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Corners3D => "corners3d",
            Self::Corners2D(_) => "corners2d",
            Self::QuaternionTrans => "quaternion",
            Self::AxisAngleTrans => "axis-angle",
            Self::TwoColumnTrans => "two-column",
        }
    }

    pub fn needs_bbox(&self) -> bool {
        matches!(self, Self::Corners3D | Self::Corners2D(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRepresentation {
    pub kind: RepresentationKind,
    pub bbox: Option<BoundingBox>,
}

impl PoseRepresentation {
    pub fn new(kind: RepresentationKind, bbox: Option<BoundingBox>) -> Self {
        Self { kind, bbox }
    }

    pub fn corners3d(bbox: BoundingBox) -> Self {
        Self::new(RepresentationKind::Corners3D, Some(bbox))
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }
}

/// `y_K = f(y_6)` and `J = df/dy_6` at the same increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Represented {
    pub values: DVector<f64>,
    pub jacobian: OMatrix<f64, Dyn, U6>,
}

/// Canonical quaternion (non-negative scalar part) of a rotation matrix.
pub fn quaternion_of(rotation: &Matrix3<f64>) -> Vector4<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let v = Vector4::new(q.w, q.i, q.j, q.k);
    if v[0] < 0.0 {
        -v
    } else {
        v
    }
}

/// Quaternion `(w, x, y, z)` of `exp_so3(omega)`.
fn quaternion_exp(omega: &Vector3<f64>) -> Vector4<f64> {
    let theta = omega.norm();
    let half_sinc = if theta < 1e-4 {
        0.5 - theta * theta / 48.0
    } else {
        (0.5 * theta).sin() / theta
    };
    Vector4::new((0.5 * theta).cos(), omega.x * half_sinc, omega.y * half_sinc, omega.z * half_sinc)
}

fn quaternion_mul(p: &Vector4<f64>, q: &Vector4<f64>) -> Vector4<f64> {
    let pv = Vector3::new(p[1], p[2], p[3]);
    let qv = Vector3::new(q[1], q[2], q[3]);
    let w = p[0] * q[0] - pv.dot(&qv);
    let v = qv * p[0] + pv * q[0] + pv.cross(&qv);
    Vector4::new(w, v.x, v.y, v.z)
}

/// Evaluates a pose representation and its Jacobian in the local chart.
///
/// The Jacobian is exact at any increment, not only at zero: a change `d`
/// of `omega` rotates the pose by `J_l(omega) d` on the left.
pub fn represent(pose: &LocalPose6, rep: &PoseRepresentation) -> Result<Represented> {
    let kind = rep.kind;
    let dim = kind.dim();
    let current = pose.to_pose();
    let rot = current.rotation;
    let t = current.translation;
    let jl = left_jacobian_so3(&pose.omega);
    // Left rotation perturbation directions for each omega coordinate.
    let dirs: [Vector3<f64>; 3] = std::array::from_fn(|k| jl.column(k).into_owned());

    let mut values = DVector::zeros(dim);
    let mut jac = OMatrix::<f64, Dyn, U6>::zeros(dim);

    let bbox = || rep.bbox.ok_or(Error::MissingBBox(kind.name()));

    match kind {
        RepresentationKind::Corners3D => {
            let bbox = bbox()?;
            for (i, b) in bbox.corners.iter().enumerate() {
                let rb = rot * b;
                values.fixed_rows_mut::<3>(3 * i).copy_from(&(rb + t));
                for (k, a) in dirs.iter().enumerate() {
                    jac.fixed_view_mut::<3, 1>(3 * i, k).copy_from(&a.cross(&rb));
                }
                jac.fixed_view_mut::<3, 3>(3 * i, 3).copy_from(&Matrix3::identity());
            }
        }
        RepresentationKind::Corners2D(intr) => {
            let bbox = bbox()?;
            for (i, b) in bbox.corners.iter().enumerate() {
                let rb = rot * b;
                let (uv, d) = intr.project_camera_point(&(rb + t))?;
                values.fixed_rows_mut::<2>(2 * i).copy_from(&uv);
                for (k, a) in dirs.iter().enumerate() {
                    jac.fixed_view_mut::<2, 1>(2 * i, k).copy_from(&(d * a.cross(&rb)));
                }
                jac.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&d);
            }
        }
        RepresentationKind::QuaternionTrans => {
            let q = quaternion_mul(&quaternion_exp(&pose.omega), &quaternion_of(&pose.reference.rotation));
            values.fixed_rows_mut::<4>(0).copy_from(&q);
            values.fixed_rows_mut::<3>(4).copy_from(&t);
            let qv = Vector3::new(q[1], q[2], q[3]);
            for (k, a) in dirs.iter().enumerate() {
                // dq = 1/2 (0, a) * q
                jac[(0, k)] = -0.5 * a.dot(&qv);
                let dv = (a * q[0] + a.cross(&qv)) * 0.5;
                jac.fixed_view_mut::<3, 1>(1, k).copy_from(&dv);
            }
            jac.fixed_view_mut::<3, 3>(4, 3).copy_from(&Matrix3::identity());
        }
        RepresentationKind::AxisAngleTrans => {
            let phi = log_so3(&rot)?;
            values.fixed_rows_mut::<3>(0).copy_from(&phi);
            values.fixed_rows_mut::<3>(3).copy_from(&t);
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(left_jacobian_inv_so3(&phi) * jl));
            jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
        }
        RepresentationKind::TwoColumnTrans => {
            for c in 0..2 {
                let col = rot.column(c).into_owned();
                values.fixed_rows_mut::<3>(3 * c).copy_from(&col);
                for (k, a) in dirs.iter().enumerate() {
                    jac.fixed_view_mut::<3, 1>(3 * c, k).copy_from(&a.cross(&col));
                }
            }
            values.fixed_rows_mut::<3>(6).copy_from(&t);
            jac.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());
        }
    }
    Ok(Represented { values, jacobian: jac })
}
