#![allow(dead_code)]

use vetocert::io::{random_init, random_init_with, InitOptions};
use vetocert::{AdversaryGeometry, Image, ModelConfig, VisionTransformer};

/// 24x24 RGB, 6x6 grid of 4px patches, 2 layers, 4 heads, d = 32.
pub fn toy_config() -> ModelConfig {
    ModelConfig::square(24, 3, 4, 32, 2, 4, 64, 10)
}

pub fn random_model(seed: u64) -> VisionTransformer {
    let cfg = toy_config();
    VisionTransformer::new(cfg.clone(), &random_init(&cfg, seed)).unwrap()
}

pub fn fragile_model(seed: u64) -> VisionTransformer {
    let cfg = toy_config();
    VisionTransformer::new(cfg.clone(), &random_init_with(&cfg, seed, InitOptions::fragile()))
        .unwrap()
}

pub fn adv6() -> AdversaryGeometry {
    AdversaryGeometry::square(6).unwrap()
}

pub fn bits(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

pub fn images(count: usize, seed: u64) -> Vec<Image> {
    vetocert::synth::structured_images(24, 24, 3, count, seed)
}
