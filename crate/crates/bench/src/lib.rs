//! Shared fixtures for the criterion benches.

use tilegan::gan::{GanArch, GanModel};
use tilegan::image_store::ImageBuffer;
use tilegan::memprof::noise_image;
use tilegan::sampler::seeded_rng;
use tilegan::trainer::TrainConfig;

/// Base width used by the pipeline benches. The full model (64) takes
/// seconds per iteration on one core.
pub const BENCH_BASE: usize = 8;

pub fn model(base: usize) -> GanModel {
    GanModel::new(GanArch::with_base(base), &mut seeded_rng(0)).expect("valid architecture")
}

pub fn image(size: usize) -> ImageBuffer {
    noise_image(size, size, size as u64).expect("non-empty image")
}

/// One-iteration-at-a-time config on `size`² crops, batch `batch`.
pub fn train_config(size: usize, batch: usize) -> TrainConfig {
    TrainConfig::new(GanArch::with_base(BENCH_BASE), size, batch, u64::MAX, 0)
}
