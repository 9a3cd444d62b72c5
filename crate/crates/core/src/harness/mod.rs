//! Synthetic scenes, toy training, oracles and metrics.

pub mod demo;
pub mod metrics;
pub mod montecarlo;
pub mod scene;
pub mod train;

pub use demo::{averaging_demo, AveragingResult};
pub use metrics::{add_metrics, model_diameter, AddResult};
pub use montecarlo::{monte_carlo_pose_cov, MonteCarloCov};
pub use scene::{gen_scene, SceneConfig, SceneSample};
pub use train::{
    evaluate, final_pose_error, gradient_correctness, probe_step, toy_train, ClipConfig, DistributionName, Evaluation, GradientClipper,
    LossKind, TrainConfig, TrainRecord, TrainTrace,
};

use rayon::prelude::*;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "LC_PNP_THREADS";

/// Sizes the global worker pool from `LC_PNP_THREADS` when it is set.
/// Only the first call in a process has an effect.
pub fn init_thread_pool() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) else {
        return;
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}

/// Runs `f` for every seed in parallel; results keep the order of `seeds`.
pub fn sweep<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}
