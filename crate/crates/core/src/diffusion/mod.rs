//! DDPM noise schedule, forward noising, Tweedie denoising and the
//! deterministic DDIM sampler.
//!
//! Images enter the diffusion process mapped from `[0,1]` to `[-1,1]`.
//! Timesteps are 1-based: `alpha_bar(0) = 1` is the clean-data limit.

mod analytic;
mod checkpoint;
mod model;
mod train;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use analytic::{GaussianDenoiser, GaussianFieldDenoiser};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use model::DiffusionModel;
pub use train::{augment, training_loss_grad, train, write_loss_csv, LossRecord, TrainConfig, TrainOutcome};

use crate::error::{DalError, Result};
use crate::image::Image;
use crate::rng::{self, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    /// Index `t` in `1..=T`; index 0 holds 0.
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Index 0 holds 1.
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        t_max,
        beta_start,
        beta_end,
        kind,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            t_max,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        } = params;
        if t_max < 2 {
            return Err(DalError::invalid("schedule needs T >= 2"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DalError::invalid(format!(
                "need 0 < beta_1 <= beta_T < 1, got {beta_start} and {beta_end}"
            )));
        }
        let mut betas = vec![0.0; t_max + 1];
        let mut alphas = vec![1.0; t_max + 1];
        let mut alpha_bars = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            let frac = (t - 1) as f64 / (t_max - 1) as f64;
            betas[t] = beta_start + frac * (beta_end - beta_start);
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(NoiseSchedule {
            params,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(DalError::invalid(format!(
                "timestep {t} outside 0..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Evenly strided DDIM subsequence `T, T - s, ..., s` with
    /// `s = T / num_steps`, in sampling order.
    pub fn ddim_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.t_max() {
            return Err(DalError::invalid(format!(
                "num_steps must lie in 1..={}, got {num_steps}",
                self.t_max()
            )));
        }
        let stride = self.t_max() / num_steps;
        Ok((0..num_steps).map(|j| self.t_max() - j * stride).collect())
    }
}

/// `[0,1]` intensities to the diffusion domain.
pub fn to_diffusion(x: &Image) -> Image {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn from_diffusion(x: &Image) -> Image {
    x.map(|v| 0.5 * (v + 1.0))
}

pub fn gaussian_image(size: usize, rng: &mut Rng) -> Image {
    Image::from_fn(size, |_, _| StandardNormal.sample(rng))
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_t(t)?;
    x0.same_size(eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// A noise predictor `eps(x_t, t)` over the diffusion domain.
pub trait Denoiser: Send + Sync {
    /// Required image size, if the model is size-specific.
    fn image_size(&self) -> Option<usize>;
    /// Predicts the noise for a batch of images sharing timestep `t`.
    fn predict_eps(&self, xs: &[Image], t: usize) -> Result<Vec<Image>>;
    /// Short identifier recorded in sample provenance.
    fn id(&self) -> String;
}

/// Posterior-mean estimate `(x_t - sqrt(1 - abar) eps) / sqrt(abar)`.
pub fn tweedie_from_eps(x_t: &Image, eps: &Image, t: usize, sched: &NoiseSchedule) -> Image {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| (x - b * e) / a)
}

pub fn tweedie(x_t: &Image, t: usize, den: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_t(t)?;
    let eps = den.predict_eps(std::slice::from_ref(x_t), t)?.remove(0);
    Ok(tweedie_from_eps(x_t, &eps, t, sched))
}

/// Noise implied by a (possibly clipped) clean estimate.
pub(crate) fn eps_from_x0(x_t: &Image, x0: &Image, t: usize, sched: &NoiseSchedule) -> Image {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(x0, |x, z| (x - a * z) / b)
}

/// Deterministic DDIM update from `t` to `t_prev` given a clean estimate.
pub(crate) fn ddim_step(x_t: &Image, x0: &Image, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Image {
    let eps = eps_from_x0(x_t, x0, t, sched);
    let ab = sched.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(&eps, |z, e| a * z + b * e)
}

/// Checks a denoiser against an image size.
pub(crate) fn check_size(den: &dyn Denoiser, size: usize) -> Result<()> {
    match den.image_size() {
        Some(d) if d != size => Err(DalError::DimensionMismatch { expected: d, got: size }),
        _ => Ok(()),
    }
}

/// Starting noise of chain `i`, shared by every sampler so conditioning
/// can be switched off without changing the trajectory.
pub(crate) fn chain_start(seed: u64, chain: usize, size: usize) -> Image {
    gaussian_image(size, &mut rng::derived_rng(seed, &[stream::CHAIN, chain as u64]))
}

/// Unconditional DDIM (eta = 0) sampling of `k` images; returned in `[0,1]`
/// (clamped). The clean estimate is clipped to `[-1,1]` at every step.
pub fn ddim_sample(
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    num_steps: usize,
    seed: u64,
    k: usize,
    size: usize,
) -> Result<Vec<Image>> {
    if k == 0 {
        return Err(DalError::invalid("k must be >= 1"));
    }
    check_size(den, size)?;
    let ts = sched.ddim_timesteps(num_steps)?;
    let mut xs: Vec<Image> = (0..k).map(|i| chain_start(seed, i, size)).collect();
    for (j, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(j + 1).copied().unwrap_or(0);
        let eps = den.predict_eps(&xs, t)?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| {
                let x0 = tweedie_from_eps(x, e, t, sched).clamp(-1.0, 1.0);
                ddim_step(x, &x0, t, t_prev, sched)
            })
            .collect();
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(DalError::NonFinite("ddim sample"));
        }
    }
    Ok(xs.iter().map(|x| from_diffusion(x).clamp(0.0, 1.0)).collect())
}
