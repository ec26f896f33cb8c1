#![allow(dead_code)]

use dal::diffusion::{DiffusionModel, ScheduleParams, TrainConfig};
use dal::image::Image;
use dal::nn::ArchConfig;

pub const TOY_SIZE: usize = 8;
pub const MODES: [f64; 2] = [0.2, 0.8];

/// Constant 8x8 images at 0.2 or 0.8, alternating.
pub fn bimodal_dataset(n: usize) -> Vec<Image> {
    (0..n).map(|i| Image::filled(TOY_SIZE, MODES[i % 2])).collect()
}

pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        channels: vec![8, 16],
        blocks_per_level: 1,
        temb_dim: 16,
        groups: 4,
    }
}

pub fn toy_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: Some(steps),
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 50,
        ema_decay: 0.99,
        rotate: false,
        scale_min: 1.0,
        scale_max: 1.0,
        seed: 1,
        ..Default::default()
    }
}

/// A small UNet trained on [`bimodal_dataset`].
pub fn bimodal_model() -> DiffusionModel {
    let data = bimodal_dataset(64);
    let (model, _) = DiffusionModel::train_new(
        &toy_arch(),
        ScheduleParams::default(),
        &data,
        &toy_train_config(1500),
        "bimodal".into(),
    )
    .unwrap();
    model
}

pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
