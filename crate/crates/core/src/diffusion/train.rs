//! Denoising score matching with an epsilon-prediction objective.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{gaussian_image, q_sample, to_diffusion, NoiseSchedule};
use crate::error::{DalError, Result};
use crate::image::Image;
use crate::nn::{clip_grad_norm, Act, Adam, Ema, EpsNet, ParamStore, Real};
use crate::rng::{self, stream};

const EPOCH_TAG: u64 = 0x4550_4f43;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimiser steps per epoch; `None` means one pass over the data.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub grad_clip: f64,
    /// Random quarter turns plus a continuous +-10 degree jitter.
    pub rotate: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: None,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 100,
            ema_decay: 0.995,
            grad_clip: 1.0,
            rotate: true,
            scale_min: 1.0,
            scale_max: 1.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DalError::invalid("batch size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(DalError::invalid("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(DalError::invalid("EMA decay must lie in [0, 1)"));
        }
        if !(1.0 <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.3) {
            return Err(DalError::invalid(format!(
                "scale range [{}, {}] must lie within [1.0, 1.3]",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    /// EMA weights (the model to use for sampling).
    pub ema: Vec<f32>,
    pub losses: Vec<LossRecord>,
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,loss")?;
    for r in losses {
        writeln!(f, "{},{},{}", r.epoch, r.step, r.loss)?;
    }
    Ok(())
}

/// Rotates by `degrees` (counter-clockwise) and zooms by `zoom` about the
/// centre, sampling bilinearly with edge replication so no fill value leaks
/// into the image.
pub fn augment(img: &Image, degrees: f64, zoom: f64) -> Image {
    let d = img.size();
    let h = (d as f64 - 1.0) / 2.0;
    let (s, c) = degrees.to_radians().sin_cos();
    let hi = (d - 1) as f64;
    Image::from_fn(d, |row, col| {
        let x = (col as f64 - h) / zoom;
        let y = (h - row as f64) / zoom;
        let xs = c * x + s * y;
        let ys = -s * x + c * y;
        let r = (h - ys).clamp(0.0, hi);
        let cc = (xs + h).clamp(0.0, hi);
        let r0 = r.floor() as usize;
        let c0 = cc.floor() as usize;
        let r1 = (r0 + 1).min(d - 1);
        let c1 = (c0 + 1).min(d - 1);
        let fr = r - r0 as f64;
        let fc = cc - c0 as f64;
        (1.0 - fr) * ((1.0 - fc) * img.get(r0, c0) + fc * img.get(r0, c1))
            + fr * ((1.0 - fc) * img.get(r1, c0) + fc * img.get(r1, c1))
    })
}

fn pack<T: Real>(images: &[Image]) -> Act<T> {
    let d = images[0].size();
    let mut act = Act::zeros(1, images.len(), d, d);
    for (b, img) in images.iter().enumerate() {
        for (dst, src) in act.data[b * d * d..(b + 1) * d * d].iter_mut().zip(img.as_slice()) {
            *dst = T::from_f64(*src);
        }
    }
    act
}

/// Mean over the batch of `||eps_hat(x_t, t) - eps||^2` (summed over
/// pixels), with `x_t = q_sample(x0, t, eps)` in the diffusion domain. The
/// gradient of this loss is accumulated into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_grad<T: Real, N: EpsNet<T>>(
    net: &N,
    params: &[T],
    x0s: &[Image],
    ts: &[usize],
    eps: &[Image],
    sched: &NoiseSchedule,
    grad: &mut [T],
) -> Result<f64> {
    if x0s.is_empty() || x0s.len() != ts.len() || x0s.len() != eps.len() {
        return Err(DalError::invalid("batch components must be non-empty and equal length"));
    }
    let xt: Vec<Image> = x0s
        .iter()
        .zip(ts)
        .zip(eps)
        .map(|((x, &t), e)| q_sample(x, t, e, sched))
        .collect::<Result<_>>()?;
    let input = pack::<T>(&xt);
    let target = pack::<T>(eps);
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let (y, tape) = net.forward(params, &input, &tf);
    let b = T::from_f64(1.0 / x0s.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = 0.0;
    let mut dy = Act::zeros_like(&y);
    for i in 0..y.data.len() {
        let r = y.data[i] - target.data[i];
        loss += r.to_f64() * r.to_f64();
        dy.data[i] = two * r * b;
    }
    net.backward(params, grad, tape, &dy);
    Ok(loss / x0s.len() as f64)
}

/// Trains `params` in place and returns the EMA weights and loss curve.
pub fn train<N: EpsNet<f32>>(
    net: &N,
    params: &mut ParamStore<f32>,
    dataset: &[Image],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DalError::Empty("training dataset"));
    }
    let d = dataset[0].size();
    if let Some(bad) = dataset.iter().find(|x| x.size() != d) {
        return Err(DalError::DimensionMismatch {
            expected: d,
            got: bad.size(),
        });
    }
    let data: Vec<Image> = dataset.iter().map(to_diffusion).collect();
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| data.len().div_ceil(cfg.batch_size))
        .max(1);
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut ema = Ema::new(&params.data, cfg.ema_decay);
    let mut losses = Vec::new();
    let pixel_norm = 1.0 / (d * d) as f32;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::derived_rng(cfg.seed, &[stream::TRAIN, EPOCH_TAG, epoch as u64]));
        let mut cursor = 0usize;
        for _ in 0..steps_per_epoch {
            let mut x0s = Vec::with_capacity(cfg.batch_size);
            let mut ts = Vec::with_capacity(cfg.batch_size);
            let mut eps = Vec::with_capacity(cfg.batch_size);
            for j in 0..cfg.batch_size {
                let img = &data[order[cursor % order.len()]];
                cursor += 1;
                let mut r = rng::derived_rng(cfg.seed, &[stream::TRAIN, step as u64, j as u64]);
                let angle = if cfg.rotate {
                    90.0 * r.gen_range(0..4) as f64 + r.gen_range(-10.0..=10.0)
                } else {
                    0.0
                };
                let zoom = if cfg.scale_max > cfg.scale_min {
                    r.gen_range(cfg.scale_min..=cfg.scale_max)
                } else {
                    cfg.scale_min
                };
                x0s.push(if angle == 0.0 && zoom == 1.0 {
                    img.clone()
                } else {
                    augment(img, angle, zoom)
                });
                ts.push(r.gen_range(1..=sched.t_max()));
                eps.push(gaussian_image(d, &mut r));
            }
            let mut grad = params.zeros_like();
            let loss = training_loss_grad(net, &params.data, &x0s, &ts, &eps, sched, &mut grad)?;
            if !loss.is_finite() {
                return Err(DalError::Diverged { step });
            }
            for g in grad.iter_mut() {
                *g *= pixel_norm;
            }
            clip_grad_norm(&mut grad, cfg.grad_clip);
            let warm = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            adam.lr = cfg.lr * warm;
            adam.step(&mut params.data, &grad);
            ema.update(&params.data);
            losses.push(LossRecord { epoch, step, loss });
            step += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.2}",
            losses[losses.len() - steps_per_epoch..].iter().map(|r| r.loss).sum::<f64>() / steps_per_epoch as f64
        );
    }
    Ok(TrainOutcome {
        ema: ema.shadow,
        losses,
    })
}
