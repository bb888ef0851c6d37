//! Benchmarks for the hot geometric and network kernels; see `benches/`.

use scenedistill_core::synth::{generate_scene, SceneSpec};
use scenedistill_core::Scene;

/// Ground truth and scan of a default-sized synthetic scene.
pub fn fixture(seed: u64) -> (Scene, Scene) {
    generate_scene(&SceneSpec::random(seed)).expect("default scene specs are valid")
}
