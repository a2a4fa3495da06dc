#![allow(dead_code)]

use dape_core::model::{Batch, ImageInput, TextInput};
use dape_core::{DapeConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// d=8 stack with one detail injection and permissive thresholds.
pub fn tiny() -> DapeConfig {
    DapeConfig {
        d: 8,
        n_layers: 2,
        feature_hw: [8, 8],
        text_len: 16,
        image_channels: 4,
        text_channels: 4,
        grid: [2, 2],
        j: 4,
        segments: 2,
        k1: 2,
        k0: 0.0,
        k_c: 0.0,
        k_thr: 0.0,
        nfa_grid: [2, 2],
        phi_period: 2,
        batch_size: 2,
        ..Default::default()
    }
}

/// d=16, I=16, J=4, two layers.
pub fn small() -> DapeConfig {
    DapeConfig {
        d: 16,
        n_layers: 2,
        feature_hw: [16, 16],
        text_len: 16,
        image_channels: 6,
        text_channels: 5,
        grid: [4, 4],
        j: 4,
        segments: 4,
        k1: 2,
        k0: 0.0,
        k_c: 0.0,
        k_thr: 0.0,
        nfa_grid: [2, 2],
        phi_period: 2,
        batch_size: 3,
        ..Default::default()
    }
}

pub fn image(cfg: &DapeConfig, r: &mut ChaCha8Rng) -> ImageInput<f64> {
    let [h, w] = cfg.feature_hw;
    ImageInput::new(Tensor::uniform(&[h, w, cfg.image_channels], -1.0, 1.0, r), cfg.cutoff_frac).unwrap()
}

/// Caption features with `words` nonzero leading positions.
pub fn text(cfg: &DapeConfig, words: usize, r: &mut ChaCha8Rng) -> TextInput<f64> {
    let full = Tensor::<f64>::uniform(&[cfg.text_len, cfg.text_channels], -1.0, 1.0, r);
    let c = cfg.text_channels;
    TextInput::new(Tensor::from_fn(&[cfg.text_len, c], |i| if i / c < words { full.data()[i] } else { 0.0 }))
}

pub fn batch(cfg: &DapeConfig, b: usize, seed: u64) -> Batch<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..b).map(|_| image(cfg, &mut r)).collect();
    let texts = (0..b).map(|k| text(cfg, cfg.text_len - 3 * k, &mut r)).collect();
    Batch::new(images, texts).unwrap()
}
