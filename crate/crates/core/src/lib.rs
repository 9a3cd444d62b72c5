//! Linear-covariance losses for differentiable PnP.
//!
//! The loss linearizes a weighted PnP solver at the ground-truth pose and
//! scores the weighted correspondences by the pose covariance and the linear
//! pose error they imply, so training needs no solver in the loop.
//!
//! ```
//! use lcpnp::harness::{gen_scene, SceneConfig};
//! use lcpnp::{lc_loss, LossConfig, PoseRepresentation};
//!
//! let scene = gen_scene(&SceneConfig { seed: 1, ..SceneConfig::default() })?;
//! let cfg = LossConfig::new(PoseRepresentation::corners3d(scene.bbox));
//! let out = lc_loss(&scene.corrs, &scene.y_gt, &cfg)?;
//! assert!(out.l_lc.is_finite() && out.grad_w.len() == 2 * scene.corrs.len());
//! # Ok::<(), lcpnp::Error>(())
//! ```

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linearize;
pub mod loss;
pub mod pnp;
pub mod robust;

pub use covariance::{pose_cov, pose_covariance, prior_cov, residual_cov, transform_cov_diag, CovarianceResult};
pub use encoding::{allocate_bits, decode_soft, encode_component, ComponentCodec};
pub use error::{Error, Result};
pub use geometry::{
    represent, BoundingBox, CameraIntrinsics, LocalPose6, PoseRepresentation, Projection, RepresentationKind,
    Represented, RigidPose,
};
pub use linearize::{linearize_at, linearize_at_gt, LinearizationResult};
pub use loss::{lc_loss, Distribution, LossBreakdown, LossConfig, LossTerms};
pub use pnp::{solve_ransac, solve_weighted, CorrespondenceSet, RansacParams, RansacSolution, SolverConfig, WeightedSolution};
pub use robust::HuberConfig;
