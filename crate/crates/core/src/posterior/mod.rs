//! Measurement-conditioned sampling from a diffusion prior.
//!
//! Each reverse step forms the Tweedie estimate `x0_hat`, pulls it towards
//! the data (soft, hard or Fourier in-painting consistency) and re-noises
//! the result to the next timestep with fresh Gaussian noise.
//!
//! Consistency runs in the diffusion domain `[-1,1]`: the data term is
//! evaluated on `(x + 1) / 2`, so measurements keep their physical units.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    chain_start, check_size, ddim_step, from_diffusion, gaussian_image, to_diffusion, tweedie_from_eps, Denoiser,
    NoiseSchedule,
};
use crate::error::{DalError, Result};
use crate::geometry::{DesignSpace, Fft2, Projector};
use crate::image::Image;
use crate::measurement::{sample_indices, MeasurementSet};
use crate::objective::DataTerm;
use crate::rng::{self, stream, Rng};

/// How many projections each stochastic consistency step looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    All,
    /// At most this many, drawn without replacement each step.
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// A fixed number of SGD steps (early stopping).
    Soft,
    /// Full-batch descent until the relative residual drops below
    /// `threshold`, within a three-phase schedule.
    Hard { threshold: f64, max_steps: usize },
    /// Exact replacement of measured k-space rows.
    FourierInpaint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub grad_steps: usize,
    /// Step in the diffusion domain; `None` uses `1/L` of the full data term.
    pub step_size: Option<f64>,
    pub batch_size: BatchSize,
    pub mode: ConsistencyMode,
    pub prescan_weight: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            grad_steps: 50,
            step_size: None,
            batch_size: BatchSize::Count(8),
            mode: ConsistencyMode::Soft,
            prescan_weight: 1.0,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if let ConsistencyMode::Hard { threshold, .. } = self.mode {
            if !(threshold > 0.0) {
                return Err(DalError::invalid("hard consistency threshold must be > 0"));
            }
        }
        if self.batch_size == BatchSize::Count(0) {
            return Err(DalError::invalid("consistency batch size must be >= 1"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DalError::invalid("consistency step size must be > 0"));
            }
        }
        if !(self.prescan_weight >= 0.0) {
            return Err(DalError::invalid("prescan weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// DDIM steps out of the schedule's `T`.
    pub num_steps: usize,
    pub consistency: ConsistencyConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            consistency: ConsistencyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub set_hash: String,
    pub seed: u64,
}

/// `k` posterior samples in `[0,1]` and their per-pixel mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<Image>,
    pub mean: Image,
    pub provenance: Provenance,
    /// Consistency gradient steps spent on each sample.
    pub consistency_steps: Vec<usize>,
}

impl SampleBatch {
    pub fn new(samples: Vec<Image>, provenance: Provenance, consistency_steps: Vec<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DalError::Empty("sample batch"));
        }
        let mean = Image::mean_of(&samples)?;
        Ok(SampleBatch {
            samples,
            mean,
            provenance,
            consistency_steps,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn size(&self) -> usize {
        self.mean.size()
    }

    /// Per-pixel variance across samples (`1/k` normalisation).
    pub fn variance(&self) -> Image {
        let k = self.k() as f64;
        let mut var = Image::zeros(self.size());
        for s in &self.samples {
            for ((v, x), m) in var.as_mut_slice().iter_mut().zip(s.as_slice()).zip(self.mean.as_slice()) {
                *v += (x - m).powi(2) / k;
            }
        }
        var
    }
}

/// Data-consistency operator over one measurement set, in the diffusion
/// domain. The step size is fixed once per set.
pub struct Consistency<'a> {
    term: DataTerm<'a>,
    cfg: &'a ConsistencyConfig,
    lr: f64,
}

impl<'a> Consistency<'a> {
    pub fn new(projector: &'a Projector, set: &'a MeasurementSet, cfg: &'a ConsistencyConfig) -> Result<Self> {
        cfg.validate()?;
        let term = DataTerm::new(projector, set, cfg.prescan_weight)?;
        if cfg.mode == ConsistencyMode::FourierInpaint && projector.fft().is_none() {
            return Err(DalError::UnsupportedOperator {
                op: "fourier_inpaint",
                reason: "measurements are not k-space rows".into(),
            });
        }
        let lr = match cfg.step_size {
            Some(s) => s,
            // x = 2u - 1 scales the curvature by 1/4
            None if !term.is_empty() => 4.0 / term.lipschitz(20).max(1e-12),
            None => 0.0,
        };
        Ok(Consistency { term, cfg, lr })
    }

    pub fn step_size(&self) -> f64 {
        self.lr
    }

    /// True when applying consistency cannot change its input.
    pub fn is_identity(&self) -> bool {
        match self.cfg.mode {
            ConsistencyMode::Soft => self.term.is_empty() || self.cfg.grad_steps == 0,
            ConsistencyMode::Hard { .. } => self.term.is_empty(),
            ConsistencyMode::FourierInpaint => self.term.set().is_empty(),
        }
    }

    /// Consistency loss of a diffusion-domain image over `subset`, with its
    /// gradient (with respect to `x`) accumulated into `grad`.
    pub fn loss_grad(&self, x: &Image, subset: Option<&[usize]>, scale: f64, grad: &mut Image) -> f64 {
        let u = from_diffusion(x);
        let mut gu = Image::zeros(x.size());
        let loss = self.term.loss_grad(&u, subset, scale, &mut gu);
        grad.axpy(0.5, &gu);
        loss
    }

    pub fn loss(&self, x: &Image) -> f64 {
        self.term.loss(&from_diffusion(x))
    }

    pub fn relative_residual(&self, x: &Image) -> f64 {
        self.term.relative_residual(&from_diffusion(x))
    }

    /// Exactly `grad_steps` minibatch gradient steps from `x`; returns the
    /// final iterate and the number of steps taken.
    pub fn soft(&self, x: &Image, rng: &mut Rng) -> Result<(Image, usize)> {
        if self.is_identity() {
            return Ok((x.clone(), 0));
        }
        let n = self.term.num_entries();
        let b = match self.cfg.batch_size {
            BatchSize::All => n,
            BatchSize::Count(c) => c.min(n),
        };
        let mut x = x.clone();
        for step in 0..self.cfg.grad_steps {
            let mut g = Image::zeros(x.size());
            let loss = if b < n {
                let subset = sample_indices(n, b, rng);
                self.loss_grad(&x, Some(&subset), n as f64 / b as f64, &mut g)
            } else {
                self.loss_grad(&x, None, 1.0, &mut g)
            };
            if !loss.is_finite() {
                return Err(DalError::Diverged { step });
            }
            x.axpy(-self.lr, &g);
        }
        if !x.is_finite() {
            return Err(DalError::Diverged {
                step: self.cfg.grad_steps,
            });
        }
        Ok((x, self.cfg.grad_steps))
    }

    /// Full-batch descent until the relative residual is below the mode's
    /// threshold.
    pub fn hard(&self, x: &Image) -> Result<HardOutcome> {
        let (threshold, max_steps) = match self.cfg.mode {
            ConsistencyMode::Hard { threshold, max_steps } => (threshold, max_steps),
            _ => return Err(DalError::invalid("hard consistency needs ConsistencyMode::Hard")),
        };
        let mut x = x.clone();
        let mut res = self.relative_residual(&x);
        let mut best = (res, x.clone());
        let mut steps = 0;
        while res >= threshold && steps < max_steps && !self.term.is_empty() {
            let mut g = Image::zeros(x.size());
            let loss = self.loss_grad(&x, None, 1.0, &mut g);
            if !loss.is_finite() {
                return Err(DalError::Diverged { step: steps });
            }
            x.axpy(-self.lr, &g);
            steps += 1;
            res = self.relative_residual(&x);
            if res < best.0 {
                best = (res, x.clone());
            }
        }
        let converged = best.0 < threshold || self.term.is_empty();
        Ok(HardOutcome {
            image: best.1,
            steps,
            converged,
            relative_residual: best.0,
        })
    }

    /// Fourier in-painting of a diffusion-domain image.
    pub fn inpaint(&self, x: &Image) -> Result<Image> {
        let fft = self.term.projector().fft().ok_or(DalError::UnsupportedOperator {
            op: "fourier_inpaint",
            reason: "measurements are not k-space rows".into(),
        })?;
        Ok(to_diffusion(&inpaint_with(fft, &from_diffusion(x), self.term.set())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardOutcome {
    /// Best iterate seen (lowest relative residual).
    pub image: Image,
    pub steps: usize,
    /// False when `max_steps` ran out before reaching the threshold.
    pub converged: bool,
    pub relative_residual: f64,
}

/// Soft consistency on a diffusion-domain estimate. `seed` drives the
/// minibatch draws.
pub fn soft_consistency(x0: &Image, set: &MeasurementSet, cfg: &ConsistencyConfig, seed: u64) -> Result<Image> {
    if cfg.mode != ConsistencyMode::Soft {
        return Err(DalError::invalid("soft_consistency needs ConsistencyMode::Soft"));
    }
    let projector = Projector::new(set.space, x0.size())?;
    let c = Consistency::new(&projector, set, cfg)?;
    Ok(c.soft(x0, &mut rng::derived_rng(seed, &[stream::SAMPLE]))?.0)
}

/// Hard consistency on a diffusion-domain estimate.
pub fn hard_consistency(x0: &Image, set: &MeasurementSet, cfg: &ConsistencyConfig) -> Result<HardOutcome> {
    let projector = Projector::new(set.space, x0.size())?;
    Consistency::new(&projector, set, cfg)?.hard(x0)
}

/// `sqrt(abar_t) x + sqrt(1 - abar_t) eps` with fresh noise.
pub fn stochastic_encode(x: &Image, t: usize, seed: u64, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_t(t)?;
    Ok(encode_with(x, t, &mut rng::derived_rng(seed, &[stream::SAMPLE]), sched))
}

fn encode_with(x: &Image, t: usize, rng: &mut Rng, sched: &NoiseSchedule) -> Image {
    let ab = sched.alpha_bar(t);
    if ab == 1.0 {
        return x.clone();
    }
    let eps = gaussian_image(x.size(), rng);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x.zip_map(&eps, |v, e| a * v + b * e)
}

/// Replaces the measured k-space rows of `x` (a `[0,1]`-domain image) by
/// their measured values and returns the real part of the inverse
/// transform: the least-squares solution closest to `x`.
pub fn fourier_inpaint(x: &Image, set: &MeasurementSet) -> Result<Image> {
    match set.space {
        DesignSpace::KspaceRows { size } if size == x.size() => {}
        DesignSpace::KspaceRows { size } => {
            return Err(DalError::DimensionMismatch {
                expected: size,
                got: x.size(),
            })
        }
        DesignSpace::Angles(_) => {
            return Err(DalError::UnsupportedOperator {
                op: "fourier_inpaint",
                reason: "measurements are not k-space rows".into(),
            })
        }
    }
    for m in set.entries() {
        if m.projection.values.len() != 2 * x.size() {
            return Err(DalError::DimensionMismatch {
                expected: 2 * x.size(),
                got: m.projection.values.len(),
            });
        }
    }
    Ok(inpaint_with(&Fft2::new(x.size()), x, set))
}

fn inpaint_with(fft: &Fft2, x: &Image, set: &MeasurementSet) -> Image {
    if set.is_empty() {
        return x.clone();
    }
    let d = x.size();
    let mut spec = fft.spectrum(x);
    let measured = set.measured_mask();
    for m in set.entries() {
        let r = m.design();
        let row: Vec<Complex64> = m.projection.values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        spec[r * d..(r + 1) * d].copy_from_slice(&row);
        // a real image's spectrum is Hermitian, so one row fixes its mirror
        let mr = fft.mirror(r);
        if !measured[mr] {
            for (c, z) in row.iter().enumerate() {
                spec[mr * d + fft.mirror(c)] = z.conj();
            }
        }
    }
    // the real part averages any pair of measured rows that disagree
    fft.image_from_spectrum(&spec)
}

/// Conditional sampling of chains `0..k`.
pub fn conditional_sample_batch(
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    projector: &Projector,
    set: &MeasurementSet,
    k: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleBatch> {
    let chains: Vec<usize> = (0..k).collect();
    conditional_sample_chains(den, sched, projector, set, &chains, cfg, seed)
}

/// Conditional sampling of the given chain indices. Every chain draws its
/// starting noise and its consistency/encoding randomness from streams
/// derived from `(seed, chain)` alone, so chain `i` is the same whatever
/// else is sampled alongside it.
pub fn conditional_sample_chains(
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    projector: &Projector,
    set: &MeasurementSet,
    chains: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleBatch> {
    if chains.is_empty() {
        return Err(DalError::invalid("k must be >= 1"));
    }
    let d = projector.image_size();
    check_size(den, d)?;
    let ts = sched.ddim_timesteps(cfg.num_steps)?;
    let cons = Consistency::new(projector, set, &cfg.consistency)?;
    let mut xs: Vec<Image> = chains.iter().map(|&i| chain_start(seed, i, d)).collect();
    let mut rngs: Vec<Rng> = chains
        .iter()
        .map(|&i| rng::derived_rng(seed, &[stream::SAMPLE, i as u64]))
        .collect();
    let mut counts = vec![0usize; chains.len()];
    let n = ts.len();
    for (j, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(j + 1).copied().unwrap_or(0);
        let eps = den.predict_eps(&xs, t)?;
        // hard mode: unconditioned, then soft, then hard, in equal thirds
        let phase = match cfg.consistency.mode {
            ConsistencyMode::Hard { .. } => 3 * j / n,
            _ => 1,
        };
        let step = |x: &mut Image, e: &Image, r: &mut Rng, count: &mut usize| -> Result<()> {
            let x0 = tweedie_from_eps(x, e, t, sched).clamp(-1.0, 1.0);
            if phase == 0 || cons.is_identity() {
                *x = ddim_step(x, &x0, t, t_prev, sched);
                return Ok(());
            }
            let fixed = match cfg.consistency.mode {
                ConsistencyMode::FourierInpaint => cons.inpaint(&x0)?,
                ConsistencyMode::Hard { .. } if phase == 2 => {
                    let out = cons.hard(&x0)?;
                    *count += out.steps;
                    out.image
                }
                _ => {
                    let (img, s) = cons.soft(&x0, r)?;
                    *count += s;
                    img
                }
            };
            *x = encode_with(&fixed, t_prev, r, sched);
            Ok(())
        };
        xs.par_iter_mut()
            .zip(eps.par_iter())
            .zip(rngs.par_iter_mut())
            .zip(counts.par_iter_mut())
            .map(|(((x, e), r), c)| step(x, e, r, c))
            .collect::<Result<()>>()?;
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(DalError::NonFinite("conditional sample"));
        }
    }
    let samples = xs.iter().map(|x| from_diffusion(x).clamp(0.0, 1.0)).collect();
    SampleBatch::new(
        samples,
        Provenance {
            model_id: den.id(),
            set_hash: set.hash(),
            seed,
        },
        counts,
    )
}

#[cfg(test)]
mod tests;
