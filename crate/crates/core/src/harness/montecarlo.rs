//! Empirical pose covariance by re-solving under resampled noise.

use nalgebra::{Matrix6, Vector2, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::scene::SceneSample;
use crate::pnp::{solve_weighted, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloCov {
    /// Mean-centred sample covariance of the local increments.
    pub cov: Matrix6<f64>,
    pub used: usize,
    /// Samples whose solve failed.
    pub skipped: usize,
}

fn mc_solver() -> SolverConfig {
    SolverConfig { max_iters: 50, step_tol: 1e-12, ..SolverConfig::default() }
}

/// Sample `k` draws its noise from a generator seeded with `seed ^ k`.
pub fn monte_carlo_pose_cov(scene: &SceneSample, sigma_px: f64, samples: usize, seed: u64) -> Result<MonteCarloCov> {
    if samples < 2 {
        return Err(Error::InvalidInput(format!("monte carlo needs at least 2 samples, got {samples}")));
    }
    if !(sigma_px >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma {sigma_px} must be non-negative")));
    }
    let clean = scene.clean_points();
    let noise = Normal::new(0.0, sigma_px).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cfg = mc_solver();
    let increments: Vec<Option<Vector6<f64>>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ k as u64);
            let x = clean.iter().map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))).collect();
            let corrs = scene.corrs.with_points(x);
            let sol = solve_weighted(&corrs, &scene.y_gt, &cfg).ok()?;
            sol.pose.local_from(&scene.y_gt).ok()
        })
        .collect();

    let ok: Vec<Vector6<f64>> = increments.iter().flatten().copied().collect();
    let used = ok.len();
    if used < 2 {
        return Err(Error::InvalidInput(format!("only {used} of {samples} samples solved")));
    }
    let mean = ok.iter().sum::<Vector6<f64>>() / used as f64;
    let mut cov = Matrix6::zeros();
    for d in &ok {
        let c = d - mean;
        cov += c * c.transpose();
    }
    cov /= (used - 1) as f64;
    Ok(MonteCarloCov { cov, used, skipped: samples - used })
}
