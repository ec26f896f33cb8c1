//! Posterior samplers behind one interface: the diffusion sampler and two
//! dataset-agnostic baselines that reconstruct directly in pixel space.
//!
//! - Ensemble: independent fits from random initialisations. Gradient
//!   descent leaves the null-space part of each initialisation untouched, so
//!   members disagree exactly where the data say nothing.
//! - SWAG-style: iterates of one minibatch SGD run, subsampled after a
//!   burn-in.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::{default_step, iterative_reconstruct_with, Fit, Init, IterativeConfig};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{DalError, Result};
use crate::geometry::Projector;
use crate::image::Image;
use crate::measurement::{sample_indices, MeasurementSet};
use crate::objective::DataTerm;
use crate::posterior::{conditional_sample_batch, Provenance, SampleBatch, SamplerConfig};
use crate::rng::{self, stream};

/// Anything that turns a measurement set into posterior samples.
pub trait PosteriorSampler: Send + Sync {
    /// Deterministic in `(set, k, seed)`.
    fn sample(&self, set: &MeasurementSet, k: usize, seed: u64) -> Result<SampleBatch>;
    /// A single point estimate.
    fn reconstruct(&self, set: &MeasurementSet) -> Result<Image>;
    fn projector(&self) -> &Projector;
    fn id(&self) -> String;
}

pub struct DiffusionSampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub projector: &'a Projector,
    pub config: SamplerConfig,
    /// Batch size used by `reconstruct`.
    pub reconstruct_k: usize,
}

impl PosteriorSampler for DiffusionSampler<'_> {
    fn sample(&self, set: &MeasurementSet, k: usize, seed: u64) -> Result<SampleBatch> {
        conditional_sample_batch(self.denoiser, self.schedule, self.projector, set, k, &self.config, seed)
    }

    fn reconstruct(&self, set: &MeasurementSet) -> Result<Image> {
        Ok(self.sample(set, self.reconstruct_k, 0)?.mean)
    }

    fn projector(&self) -> &Projector {
        self.projector
    }

    fn id(&self) -> String {
        self.denoiser.id()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub iterative: IterativeConfig,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            iterative: IterativeConfig {
                tv_weight: 1e-3,
                ..Default::default()
            },
            init_mean: 0.5,
            init_std: 0.1,
        }
    }
}

fn random_init(d: usize, mean: f64, std: f64, seed: u64, tags: &[u64]) -> Result<Image> {
    let dist = Normal::new(mean, std).map_err(|e| DalError::invalid(e.to_string()))?;
    let mut r = rng::derived_rng(seed, tags);
    Ok(Image::from_fn(d, |_, _| dist.sample(&mut r)))
}

/// `k` independent reconstructions from `N(init_mean, init_std^2)` starts.
pub fn ensemble_sample(
    projector: &Projector,
    set: &MeasurementSet,
    k: usize,
    seed: u64,
    cfg: &EnsembleConfig,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(DalError::invalid("k must be >= 1"));
    }
    let d = projector.image_size();
    let members = (0..k)
        .into_par_iter()
        .map(|i| {
            let init = random_init(d, cfg.init_mean, cfg.init_std, seed, &[stream::MEMBER, i as u64])?;
            let member_cfg = IterativeConfig {
                init: Init::Given(init),
                ..cfg.iterative.clone()
            };
            iterative_reconstruct_with(projector, set, &member_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    SampleBatch::new(
        members,
        Provenance {
            model_id: "ensemble".into(),
            set_hash: set.hash(),
            seed,
        },
        vec![cfg.iterative.steps; k],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwagConfig {
    /// Total SGD steps, step size, link and TV weight.
    pub iterative: IterativeConfig,
    /// Fraction of the run discarded before sampling.
    pub burn_in: f64,
    /// Steps between kept iterates; `None` spreads `k` iterates over the
    /// post-burn-in phase.
    pub stride: Option<usize>,
    /// Projections per SGD step (at most `|set|`).
    pub batch_size: usize,
    /// Step size decays as `lr / (1 + step)^decay`; 0 keeps it constant.
    pub decay: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for SwagConfig {
    fn default() -> Self {
        SwagConfig {
            iterative: IterativeConfig {
                tv_weight: 1e-3,
                ..Default::default()
            },
            burn_in: 0.5,
            stride: None,
            batch_size: 8,
            decay: 0.0,
            init_mean: 0.5,
            init_std: 0.1,
        }
    }
}

/// `k` iterates of one minibatch SGD trajectory taken after burn-in.
pub fn swag_sample(
    projector: &Projector,
    set: &MeasurementSet,
    k: usize,
    seed: u64,
    cfg: &SwagConfig,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(DalError::invalid("k must be >= 1"));
    }
    cfg.iterative.validate()?;
    if !(0.0..1.0).contains(&cfg.burn_in) {
        return Err(DalError::invalid("burn-in fraction must lie in [0, 1)"));
    }
    if cfg.batch_size == 0 {
        return Err(DalError::invalid("SGD batch size must be >= 1"));
    }
    let steps = cfg.iterative.steps;
    let burn = (steps as f64 * cfg.burn_in).floor() as usize;
    let stride = match cfg.stride {
        Some(0) => return Err(DalError::invalid("SWAG stride must be >= 1")),
        Some(s) => s,
        None => ((steps - burn) / k).max(1),
    };
    if burn + k * stride > steps {
        return Err(DalError::invalid(format!(
            "trajectory of {steps} steps is shorter than burn-in {burn} + {k} x stride {stride}"
        )));
    }
    let term = DataTerm::new(projector, set, cfg.iterative.prescan_weight)?;
    let lr0 = match cfg.iterative.step_size {
        Some(s) => s,
        None => default_step(&term, cfg.iterative.link),
    };
    let n = term.num_entries();
    let b = cfg.batch_size.min(n);
    let d = projector.image_size();
    let init = random_init(d, cfg.init_mean, cfg.init_std, seed, &[stream::MEMBER])?;
    let mut fit = Fit::new(term, cfg.iterative.link, cfg.iterative.tv_weight, &init);
    let mut r = rng::derived_rng(seed, &[stream::SAMPLE]);
    let mut samples = Vec::with_capacity(k);
    let total = if set.has_no_data() { 0 } else { burn + k * stride };
    if total == 0 {
        samples = vec![fit.image(); k];
    }
    for step in 0..total {
        let lr = lr0 / (1.0 + step as f64).powf(cfg.decay);
        let loss = if b < n {
            let subset = sample_indices(n, b, &mut r);
            fit.step(lr, Some(&subset), n as f64 / b as f64)
        } else {
            fit.step(lr, None, 1.0)
        };
        if !loss.is_finite() {
            return Err(DalError::Diverged { step });
        }
        let done = step + 1;
        if done > burn && (done - burn) % stride == 0 {
            samples.push(fit.image());
        }
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(DalError::Diverged { step: steps });
    }
    SampleBatch::new(
        samples,
        Provenance {
            model_id: "swag".into(),
            set_hash: set.hash(),
            seed,
        },
        vec![burn + k * stride; k],
    )
}

pub struct EnsembleSampler<'a> {
    pub projector: &'a Projector,
    pub config: EnsembleConfig,
}

impl PosteriorSampler for EnsembleSampler<'_> {
    fn sample(&self, set: &MeasurementSet, k: usize, seed: u64) -> Result<SampleBatch> {
        ensemble_sample(self.projector, set, k, seed, &self.config)
    }

    fn reconstruct(&self, set: &MeasurementSet) -> Result<Image> {
        iterative_reconstruct_with(self.projector, set, &self.config.iterative)
    }

    fn projector(&self) -> &Projector {
        self.projector
    }

    fn id(&self) -> String {
        "ensemble".into()
    }
}

pub struct SwagSampler<'a> {
    pub projector: &'a Projector,
    pub config: SwagConfig,
}

impl PosteriorSampler for SwagSampler<'_> {
    fn sample(&self, set: &MeasurementSet, k: usize, seed: u64) -> Result<SampleBatch> {
        swag_sample(self.projector, set, k, seed, &self.config)
    }

    fn reconstruct(&self, set: &MeasurementSet) -> Result<Image> {
        iterative_reconstruct_with(self.projector, set, &self.config.iterative)
    }

    fn projector(&self) -> &Projector {
        self.projector
    }

    fn id(&self) -> String {
        "swag".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngleGrid, DesignSpace};
    use crate::measurement::{measure, NoiseModel};

    fn setup(d: usize, designs: &[usize]) -> (Projector, MeasurementSet, Image) {
        let p = Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), d).unwrap();
        let truth = Image::from_fn(d, |r, c| {
            let (y, x) = (r as f64 / d as f64 - 0.5, c as f64 / d as f64 - 0.4);
            if x * x + 2.0 * y * y < 0.1 { 0.8 } else { 0.2 }
        });
        let mut set = MeasurementSet::new(*p.space());
        for &psi in designs {
            set.add(measure(&truth, psi, &p, NoiseModel::None, 0).unwrap()).unwrap();
        }
        (p, set, truth)
    }

    fn max_std(b: &SampleBatch) -> f64 {
        b.variance().as_slice().iter().fold(0.0f64, |m, v| m.max(v.sqrt()))
    }

    fn mean_std(b: &SampleBatch) -> f64 {
        let v = b.variance();
        v.as_slice().iter().map(|v| v.sqrt()).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn ensemble_collapses_with_complete_data() {
        // The 2x2 checkerboard on the rotation centre is a near-null mode of
        // the 180-angle operator (eigenvalue 2.6e-2 against 2.75e3), so the
        // members only agree on it after ~1e5 steps; it is excluded here.
        let all: Vec<usize> = (0..180).collect();
        let (p, set, _) = setup(16, &all);
        let cfg = EnsembleConfig {
            iterative: IterativeConfig {
                steps: 8000,
                tv_weight: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let b = ensemble_sample(&p, &set, 4, 1, &cfg).unwrap();
        let v = b.variance();
        for r in 0..16 {
            for c in 0..16 {
                if (7..9).contains(&r) && (7..9).contains(&c) {
                    continue;
                }
                assert!(v.get(r, c).sqrt() < 1e-2, "std {} at ({r}, {c})", v.get(r, c).sqrt());
            }
        }
        assert!(mean_std(&b) < 1e-2);
    }

    #[test]
    fn ensemble_spreads_with_one_angle() {
        let (p, set, _) = setup(16, &[0]);
        let b = ensemble_sample(&p, &set, 4, 1, &EnsembleConfig::default()).unwrap();
        assert!(max_std(&b) > 1e-2);
        let one = ensemble_sample(&p, &set, 1, 1, &EnsembleConfig::default()).unwrap();
        assert_eq!(one.mean, one.samples[0]);
        assert_eq!(b, ensemble_sample(&p, &set, 4, 1, &EnsembleConfig::default()).unwrap());
    }

    #[test]
    fn swag_rejects_degenerate_subsampling() {
        let (p, set, _) = setup(8, &[0, 90]);
        let zero = SwagConfig {
            stride: Some(0),
            ..Default::default()
        };
        assert!(swag_sample(&p, &set, 4, 0, &zero).is_err());
        let short = SwagConfig {
            stride: Some(30),
            ..Default::default()
        };
        assert!(swag_sample(&p, &set, 4, 0, &short).is_err());
        assert!(swag_sample(&p, &set, 0, 0, &SwagConfig::default()).is_err());
    }

    #[test]
    fn swag_is_deterministic_and_keeps_k_iterates() {
        let (p, set, _) = setup(8, &[0, 30, 60, 90, 120, 150, 170, 10, 45, 100]);
        let b = swag_sample(&p, &set, 5, 3, &SwagConfig::default()).unwrap();
        assert_eq!(b.k(), 5);
        assert_eq!(b, swag_sample(&p, &set, 5, 3, &SwagConfig::default()).unwrap());
        assert!(mean_std(&b) > 0.0);
    }

    #[test]
    fn swag_spread_shrinks_with_a_longer_decaying_run() {
        let all: Vec<usize> = (0..180).collect();
        let (p, set, _) = setup(16, &all);
        let run = |steps| {
            let cfg = SwagConfig {
                iterative: IterativeConfig {
                    steps,
                    tv_weight: 0.0,
                    ..Default::default()
                },
                decay: 0.5,
                ..Default::default()
            };
            mean_std(&swag_sample(&p, &set, 4, 2, &cfg).unwrap())
        };
        let (short, long) = (run(100), run(1000));
        assert!(long < short, "{long} vs {short}");
    }
}
