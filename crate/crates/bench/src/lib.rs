//! Shared fixtures for the benchmarks.

use depthcrf::data::{gen_synthetic_scene, DepthSample, SceneSpec};
use depthcrf::ModelConfig;

/// The small model used for overfitting runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig { window_size: 4, ..ModelConfig::default() }
}

pub fn scene(cfg: &ModelConfig, seed: u64, side: usize) -> DepthSample {
    gen_synthetic_scene(&SceneSpec::from_config(cfg, seed, side)).expect("valid scene")
}
