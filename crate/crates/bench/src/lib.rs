//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdmi_core::train::{Dataset, TrainConfig, Variant};
use tdmi_core::Tensor;

/// Trend-suite model and data geometry with a small clip count.
pub fn bench_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig {
        variant,
        alpha: 0.001,
        train_clips: 32,
        eval_clips: 8,
        ..TrainConfig::default()
    };
    c.data.image_size = 32;
    c.model.channels = [8, 16, 32, 64];
    c.model.motion_channels = 16;
    c
}

pub fn bench_data(cfg: &TrainConfig) -> Dataset {
    Dataset::generate(cfg).expect("bench data")
}

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
}
