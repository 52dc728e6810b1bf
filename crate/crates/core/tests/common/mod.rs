#![allow(dead_code)]

use garmentfuse_core::diffusion::model::Models;
use garmentfuse_core::encoder::GarmentCategory;
use garmentfuse_core::fusion::{FusionConfig, FusionMode};
use garmentfuse_core::rng::{normal_tensor, seeded};
use garmentfuse_core::unet::UNetConfig;
use garmentfuse_core::{Scalar, Tensor};

/// Smallest geometry that still has two levels, a mid block and attention
/// at every level.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        height: 8,
        width: 8,
        base_width: 8,
        channel_mult: vec![1, 2],
        attention: vec![true, true],
        groups: 4,
        text_dim: 4,
        time_dim: 8,
        ..Default::default()
    }
}

/// Tiny models with every parameter jittered, so zero-initialized output
/// projections do not hide the attention paths.
pub fn tiny_models<E: Scalar>(mode: FusionMode, seed: u64) -> Models<E> {
    let fusion = FusionConfig {
        mode,
        ..Default::default()
    };
    let mut m = Models::new(tiny_config(), fusion, seed).unwrap();
    m.denoiser.jitter(0.05, &mut seeded(seed ^ 0xD));
    m.encoder.jitter(0.05, &mut seeded(seed ^ 0xE));
    m
}

pub fn image<E: Scalar>(seed: u64) -> Tensor<E> {
    let cfg = tiny_config();
    normal_tensor(&[1, cfg.in_channels, cfg.height, cfg.width], &mut seeded(seed))
}

pub fn two_garments<E: Scalar>(seed: u64) -> Vec<(GarmentCategory, Tensor<E>)> {
    vec![
        (GarmentCategory::Upper, image(seed)),
        (GarmentCategory::Lower, image(seed + 1)),
    ]
}
