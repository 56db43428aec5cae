//! Shared fixtures for the benchmarks.

use layerseg::synth::generate_scene;
use layerseg::{NetworkConfig, Scene, SceneSpec};

/// The toy network used in the end-to-end experiments.
pub fn toy_network() -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        base_channels: 8,
        layers: 4,
        head_channels: 16,
        input_channels: 1,
    }
}

/// A default 64x64 ellipse scene.
pub fn toy_scene(seed: u64) -> Scene {
    generate_scene(&SceneSpec::default().with_seed(seed))
        .expect("default spec is valid")
        .scene
}
