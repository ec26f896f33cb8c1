use rand::Rng as _;

use super::*;
use crate::classic::{iterative_reconstruct_with, IterativeConfig};
use crate::diffusion::{ddim_sample, GaussianDenoiser, GaussianFieldDenoiser, ScheduleParams};
use crate::geometry::AngleGrid;
use crate::measurement::{measure, NoiseModel};
use crate::metrics::psnr;

fn sched() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleParams::default()).unwrap()
}

fn angles() -> DesignSpace {
    DesignSpace::Angles(AngleGrid::full_degree())
}

fn smooth(d: usize, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                r.gen_range(0.2..0.8) * d as f64,
                r.gen_range(0.2..0.8) * d as f64,
                r.gen_range(0.1..0.25) * d as f64,
                r.gen_range(0.2..0.5),
            )
        })
        .collect();
    Image::from_fn(d, |i, j| {
        let v: f64 = bumps
            .iter()
            .map(|&(ci, cj, s, a)| a * (-((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        v.min(1.0)
    })
}

fn radon_set(truth: &Image, designs: &[usize], p: &Projector) -> MeasurementSet {
    let mut set = MeasurementSet::new(*p.space());
    for &psi in designs {
        set.add(measure(truth, psi, p, NoiseModel::None, 0).unwrap()).unwrap();
    }
    set
}

fn kspace_set(truth: &Image, rows: &[usize]) -> (Projector, MeasurementSet) {
    let space = DesignSpace::KspaceRows { size: truth.size() };
    let p = Projector::new(space, truth.size()).unwrap();
    let set = radon_set(truth, rows, &p);
    (p, set)
}

fn hard_cfg(threshold: f64, max_steps: usize) -> ConsistencyConfig {
    ConsistencyConfig {
        mode: ConsistencyMode::Hard { threshold, max_steps },
        ..Default::default()
    }
}

#[test]
fn soft_consistency_trivial_cases() {
    let x = gaussian_image(8, &mut rng::rng(1)).clamp(-1.0, 1.0);
    let empty = MeasurementSet::new(angles());
    assert_eq!(soft_consistency(&x, &empty, &ConsistencyConfig::default(), 3).unwrap(), x);
    let p = Projector::new(angles(), 8).unwrap();
    let set = radon_set(&smooth(8, 2), &[0, 60, 120], &p);
    let cfg = ConsistencyConfig {
        grad_steps: 0,
        ..Default::default()
    };
    assert_eq!(soft_consistency(&x, &set, &cfg, 3).unwrap(), x);
    assert!(soft_consistency(&x, &set, &hard_cfg(1e-3, 10), 3).is_err());
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    let d = 8;
    let p = Projector::new(angles(), d).unwrap();
    let set = radon_set(&smooth(d, 4), &[10, 75, 140], &p);
    let cfg = ConsistencyConfig::default();
    let c = Consistency::new(&p, &set, &cfg).unwrap();
    let mut r = rng::rng(5);
    let x = gaussian_image(d, &mut r).map(|v| 0.5 * v);
    let mut g = Image::zeros(d);
    c.loss_grad(&x, None, 1.0, &mut g);
    let h = 1e-5;
    for _ in 0..20 {
        let i = r.gen_range(0..d * d);
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= h;
        let fd = (c.loss(&xp) - c.loss(&xm)) / (2.0 * h);
        let an = g.as_slice()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
        assert!(rel < 1e-4, "pixel {i}: fd {fd} analytic {an}");
    }
}

#[test]
fn soft_consistency_reduces_the_residual() {
    let d = 16;
    let p = Projector::new(angles(), d).unwrap();
    let set = radon_set(&smooth(d, 6), &[0, 30, 60, 90, 120, 150], &p);
    let cfg = ConsistencyConfig::default();
    let c = Consistency::new(&p, &set, &cfg).unwrap();
    let x = Image::zeros(d);
    let (y, steps) = c.soft(&x, &mut rng::rng(0)).unwrap();
    assert_eq!(steps, 50);
    assert!(c.relative_residual(&y) < 0.5 * c.relative_residual(&x));
}

#[test]
fn hard_consistency_huge_threshold_takes_no_steps() {
    let d = 16;
    let p = Projector::new(angles(), d).unwrap();
    let set = radon_set(&smooth(d, 7), &[0, 45, 90], &p);
    let x = Image::filled(d, -0.2);
    let cfg = hard_cfg(1e9, 100);
    let out = Consistency::new(&p, &set, &cfg).unwrap().hard(&x).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.converged);
    assert_eq!(out.image, x);
}

#[test]
fn hard_consistency_solves_overdetermined_problem_and_beats_soft() {
    let d = 16;
    let p = Projector::new(angles(), d).unwrap();
    let all: Vec<usize> = (0..180).collect();
    let set = radon_set(&smooth(d, 8), &all, &p);
    let threshold = 1e-4;
    let cfg = hard_cfg(threshold, 20_000);
    let c = Consistency::new(&p, &set, &cfg).unwrap();
    let x = Image::zeros(d);
    let out = c.hard(&x).unwrap();
    assert!(out.converged, "residual {}", out.relative_residual);
    assert!(c.relative_residual(&out.image) < threshold);
    assert!(out.steps > 0);

    let soft_cfg = ConsistencyConfig::default();
    let s = Consistency::new(&p, &set, &soft_cfg).unwrap();
    let (y, _) = s.soft(&x, &mut rng::rng(1)).unwrap();
    assert!(out.relative_residual <= s.relative_residual(&y));
}

#[test]
fn hard_consistency_flags_exhausted_budget() {
    let d = 16;
    let p = Projector::new(angles(), d).unwrap();
    let all: Vec<usize> = (0..180).collect();
    let set = radon_set(&smooth(d, 9), &all, &p);
    let cfg = hard_cfg(1e-12, 3);
    let out = Consistency::new(&p, &set, &cfg).unwrap().hard(&Image::zeros(d)).unwrap();
    assert_eq!(out.steps, 3);
    assert!(!out.converged);
}

#[test]
fn stochastic_encode_properties() {
    let s = sched();
    let x = smooth(4, 10);
    assert_eq!(stochastic_encode(&x, 0, 5, &s).unwrap(), x);
    assert_eq!(stochastic_encode(&x, 300, 5, &s).unwrap(), stochastic_encode(&x, 300, 5, &s).unwrap());
    assert!(stochastic_encode(&x, 1001, 5, &s).is_err());

    let t = 200;
    let a = s.alpha_bar(t).sqrt();
    let x = Image::from_fn(2, |r, c| 0.6 + 0.1 * (2 * r + c) as f64);
    let n = 10_000;
    let mut sum = Image::zeros(2);
    for seed in 0..n {
        sum.axpy(1.0 / n as f64, &stochastic_encode(&x, t, seed, &s).unwrap());
    }
    for (m, v) in sum.as_slice().iter().zip(x.as_slice()) {
        assert!((m - a * v).abs() < 0.03 * a * v, "{m} vs {}", a * v);
    }
}

#[test]
fn fourier_inpaint_complete_and_empty() {
    let d = 16;
    let truth = smooth(d, 11);
    let all: Vec<usize> = (0..d).collect();
    let (_, full) = kspace_set(&truth, &all);
    let x = gaussian_image(d, &mut rng::rng(12));
    let out = fourier_inpaint(&x, &full).unwrap();
    for (a, b) in out.as_slice().iter().zip(truth.as_slice()) {
        assert!((a - b).abs() < 1e-8);
    }
    let (_, none) = kspace_set(&truth, &[]);
    let same = fourier_inpaint(&x, &none).unwrap();
    for (a, b) in same.as_slice().iter().zip(x.as_slice()) {
        assert!((a - b).abs() < 1e-10);
    }
    let p = Projector::new(angles(), d).unwrap();
    assert!(fourier_inpaint(&x, &radon_set(&truth, &[0], &p)).is_err());
}

#[test]
fn fourier_inpaint_matches_gradient_descent_and_is_idempotent() {
    let d = 32;
    let truth = smooth(d, 13);
    let rows = [3, 9, 14, 16, 17, 20, 25, 30];
    let (p, set) = kspace_set(&truth, &rows);
    let x = smooth(d, 14);
    let out = fourier_inpaint(&x, &set).unwrap();
    for m in set.entries() {
        let got = p.forward(m.design(), &out).unwrap();
        for (a, b) in got.iter().zip(&m.projection.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }
    let term = DataTerm::new(&p, &set, 0.0).unwrap();
    let lr = 1.0 / term.lipschitz(50);
    let mut gd = x.clone();
    for _ in 0..2000 {
        let mut g = Image::zeros(d);
        term.loss_grad(&gd, None, 1.0, &mut g);
        gd.axpy(-lr, &g);
    }
    for (a, b) in out.as_slice().iter().zip(gd.as_slice()) {
        assert!((a - b).abs() < 1e-4);
    }
    let twice = fourier_inpaint(&out, &set).unwrap();
    for (a, b) in twice.as_slice().iter().zip(out.as_slice()) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn gaussian_prior(s: &NoiseSchedule) -> GaussianDenoiser {
    GaussianDenoiser {
        mu: 0.0,
        tau: 0.4,
        schedule: s.clone(),
    }
}

#[test]
fn unconditioned_sampling_equals_ddim() {
    let s = sched();
    let den = gaussian_prior(&s);
    let p = Projector::new(angles(), 8).unwrap();
    let empty = MeasurementSet::new(angles());
    let cfg = SamplerConfig::default();
    let batch = conditional_sample_batch(&den, &s, &p, &empty, 1, &cfg, 21).unwrap();
    let plain = ddim_sample(&den, &s, 50, 21, 1, 8).unwrap();
    assert_eq!(batch.samples, plain);

    let set = radon_set(&smooth(8, 1), &[0, 90], &p);
    let off = SamplerConfig {
        consistency: ConsistencyConfig {
            grad_steps: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let batch = conditional_sample_batch(&den, &s, &p, &set, 1, &off, 21).unwrap();
    assert_eq!(batch.samples, plain);
}

#[test]
fn chain_order_only_permutes_samples() {
    let s = sched();
    let den = gaussian_prior(&s);
    let p = Projector::new(angles(), 8).unwrap();
    let set = radon_set(&smooth(8, 2), &[0, 45, 90], &p);
    let cfg = SamplerConfig {
        num_steps: 10,
        consistency: ConsistencyConfig {
            grad_steps: 5,
            batch_size: BatchSize::Count(2),
            ..Default::default()
        },
    };
    let a = conditional_sample_chains(&den, &s, &p, &set, &[0, 1, 2, 3], &cfg, 4).unwrap();
    let b = conditional_sample_chains(&den, &s, &p, &set, &[3, 1, 0, 2], &cfg, 4).unwrap();
    for (pos, &chain) in [3usize, 1, 0, 2].iter().enumerate() {
        assert_eq!(b.samples[pos], a.samples[chain]);
    }
    let again = conditional_sample_chains(&den, &s, &p, &set, &[0, 1, 2, 3], &cfg, 4).unwrap();
    assert_eq!(again, a);
}

#[test]
fn batch_mean_is_exact_and_provenance_recorded() {
    let s = sched();
    let den = gaussian_prior(&s);
    let p = Projector::new(angles(), 8).unwrap();
    let set = radon_set(&smooth(8, 3), &[10], &p);
    let cfg = SamplerConfig {
        num_steps: 10,
        ..Default::default()
    };
    let b = conditional_sample_batch(&den, &s, &p, &set, 3, &cfg, 8).unwrap();
    assert_eq!(b.k(), 3);
    for i in 0..64 {
        let m = b.samples.iter().map(|x| x.as_slice()[i]).sum::<f64>() / 3.0;
        assert!((m - b.mean.as_slice()[i]).abs() < 1e-15);
    }
    assert_eq!(b.provenance.set_hash, set.hash());
    assert_eq!(b.provenance.seed, 8);
    assert_eq!(b.provenance.model_id, den.id());
    assert!(conditional_sample_batch(&den, &s, &p, &set, 0, &cfg, 8).is_err());
}

#[test]
fn soft_step_count_is_independent_of_set_size() {
    let s = sched();
    let den = gaussian_prior(&s);
    let p = Projector::new(angles(), 8).unwrap();
    let truth = smooth(8, 4);
    let cfg = SamplerConfig {
        num_steps: 10,
        consistency: ConsistencyConfig {
            grad_steps: 7,
            ..Default::default()
        },
    };
    for n in [1usize, 5, 20] {
        let designs: Vec<usize> = (0..n).map(|i| i * 9).collect();
        let set = radon_set(&truth, &designs, &p);
        let b = conditional_sample_batch(&den, &s, &p, &set, 2, &cfg, 1).unwrap();
        assert_eq!(b.consistency_steps, vec![70, 70]);
    }
}

#[test]
fn hard_schedule_spends_steps_only_after_the_first_third() {
    let s = sched();
    let den = gaussian_prior(&s);
    let p = Projector::new(angles(), 8).unwrap();
    let set = radon_set(&smooth(8, 5), &[0, 30, 60, 90, 120, 150], &p);
    let cfg = SamplerConfig {
        num_steps: 9,
        consistency: ConsistencyConfig {
            grad_steps: 4,
            mode: ConsistencyMode::Hard {
                threshold: 1e9,
                max_steps: 100,
            },
            ..Default::default()
        },
    };
    // three soft steps in the middle third; the hard third starts converged
    let b = conditional_sample_batch(&den, &s, &p, &set, 1, &cfg, 1).unwrap();
    assert_eq!(b.consistency_steps, vec![12]);
}

#[test]
fn complete_data_soft_sampling_matches_iterative_reconstruction() {
    // a stationary Gaussian field whose correlation length matches the bumps
    // stands in for a prior trained on this image family
    let d = 16;
    let s = sched();
    let den = GaussianFieldDenoiser::new(-0.5, 0.4, 6.0, d, s.clone());
    let p = Projector::new(angles(), d).unwrap();
    let all: Vec<usize> = (0..180).collect();
    for seed in [15, 16, 17] {
        let truth = smooth(d, seed);
        let set = radon_set(&truth, &all, &p);
        let b = conditional_sample_batch(&den, &s, &p, &set, 2, &SamplerConfig::default(), 3).unwrap();
        let iter = iterative_reconstruct_with(&p, &set, &IterativeConfig::default()).unwrap();
        let (ps, pi) = (psnr(&b.mean, &truth).unwrap(), psnr(&iter, &truth).unwrap());
        assert!(ps >= pi - 1.0, "diffusion {ps} dB vs iterative {pi} dB");
    }
}

#[test]
fn fourier_mode_reproduces_measured_rows() {
    let d = 8;
    let s = sched();
    let den = gaussian_prior(&s);
    let truth = smooth(d, 16);
    let (p, set) = kspace_set(&truth, &[2, 4, 5]);
    let cfg = SamplerConfig {
        num_steps: 10,
        consistency: ConsistencyConfig {
            mode: ConsistencyMode::FourierInpaint,
            ..Default::default()
        },
    };
    let b = conditional_sample_batch(&den, &s, &p, &set, 2, &cfg, 0).unwrap();
    // the last step returns the in-painted estimate; only the final clamp
    // to [0,1] can move it off the data
    for x in &b.samples {
        let err = DataTerm::new(&p, &set, 0.0).unwrap().relative_residual(x);
        assert!(err < 0.05, "relative residual {err}");
    }
    let radon = Projector::new(angles(), d).unwrap();
    assert!(conditional_sample_batch(&den, &s, &radon, &MeasurementSet::new(angles()), 1, &cfg, 0).is_err());
}
