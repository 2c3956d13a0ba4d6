//! Fixtures shared by the kernel benchmarks.

use xcam_core::data::{generate, GenerateConfig};
use xcam_core::zoo::{build_model, Architecture};
use xcam_core::{ModelGraph, Tensor};

/// An untrained model of the given architecture and one synthetic image.
pub fn fixture(arch: Architecture) -> (ModelGraph, Tensor) {
    let data = generate(&GenerateConfig {
        seed: 0,
        num_samples: 1,
        ..GenerateConfig::default()
    })
    .expect("default generator config is valid");
    let image = data.samples.into_iter().next().expect("one sample").image;
    (build_model(arch, 0), image)
}
