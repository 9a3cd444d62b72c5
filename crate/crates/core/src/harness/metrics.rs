//! ADD and ADD-S pose metrics.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::RigidPose;

/// Recall threshold as a fraction of the object diameter.
pub const RECALL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddResult {
    pub add: f64,
    pub recall_ok: bool,
}

/// Mean point distance between the two placements of `model_points`; with
/// `symmetric`, each predicted point is matched to its nearest ground-truth
/// point instead.
pub fn add_metrics(
    pred: &RigidPose,
    gt: &RigidPose,
    model_points: &[Vector3<f64>],
    diameter: f64,
    symmetric: bool,
) -> Result<AddResult> {
    if model_points.is_empty() {
        return Err(Error::InvalidInput("no model points".into()));
    }
    if !(diameter > 0.0) {
        return Err(Error::InvalidInput(format!("diameter {diameter} must be positive")));
    }
    let p: Vec<Vector3<f64>> = model_points.iter().map(|m| pred.transform(m)).collect();
    let g: Vec<Vector3<f64>> = model_points.iter().map(|m| gt.transform(m)).collect();
    let total: f64 = if symmetric {
        p.iter().map(|a| g.iter().map(|b| (a - b).norm_squared()).fold(f64::MAX, f64::min).sqrt()).sum()
    } else {
        p.iter().zip(&g).map(|(a, b)| (a - b).norm()).sum()
    };
    let add = total / model_points.len() as f64;
    Ok(AddResult { add, recall_ok: add < RECALL_FRACTION * diameter })
}

/// Largest pairwise distance.
pub fn model_diameter(points: &[Vector3<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max((a - b).norm_squared());
        }
    }
    d.sqrt()
}
