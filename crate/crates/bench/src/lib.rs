//! Shared fixtures for the benchmarks in `benches/`.

use mvrd_core::synth::{render_clip, MultiViewClip, Scenario, SceneConfig};

/// A 300-frame, 32×32 clip of the given scenario.
pub fn clip(scenario: Scenario) -> MultiViewClip {
    render_clip(&SceneConfig {
        scenario,
        ..SceneConfig::default()
    })
    .expect("default scene renders")
}
