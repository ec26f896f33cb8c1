//! Posterior behaviour of a diffusion prior trained on constant images at
//! two intensities.

mod common;

use common::*;
use dal::diffusion::DiffusionModel;
use dal::geometry::{AngleGrid, DesignSpace, Projector};
use dal::image::Image;
use dal::measurement::{measure, MeasurementSet, NoiseModel};
use dal::posterior::{conditional_sample_batch, SampleBatch, SamplerConfig};

fn space() -> DesignSpace {
    DesignSpace::Angles(AngleGrid::uniform(16).unwrap())
}

fn sample(model: &DiffusionModel, set: &MeasurementSet, k: usize, seed: u64) -> SampleBatch {
    let p = Projector::new(set.space, TOY_SIZE).unwrap();
    conditional_sample_batch(model, &model.schedule, &p, set, k, &SamplerConfig::default(), seed).unwrap()
}

fn measured(truth: &Image, designs: &[usize]) -> MeasurementSet {
    let p = Projector::new(space(), TOY_SIZE).unwrap();
    let mut set = MeasurementSet::new(space());
    for &d in designs {
        set.add(measure(truth, d, &p, NoiseModel::None, 0).unwrap()).unwrap();
    }
    set
}

fn rms_to(img: &Image, value: f64) -> f64 {
    (img.as_slice().iter().map(|v| (v - value).powi(2)).sum::<f64>() / img.as_slice().len() as f64).sqrt()
}

fn mean_pixel_variance(batch: &SampleBatch) -> f64 {
    batch.variance().mean()
}

#[test]
fn toy_prior_behaviour() {
    let model = bimodal_model();

    // unconditional samples land on one of the two modes
    let free = sample(&model, &MeasurementSet::new(space()), 100, 0);
    let on_mode = free
        .samples
        .iter()
        .filter(|s| MODES.iter().any(|m| (s.mean() - m).abs() <= 0.1))
        .count();
    assert!(on_mode >= 90, "{on_mode}/100 unconditional samples near a mode");
    let high = free.samples.iter().filter(|s| s.mean() > 0.5).count();
    assert!((20..=80).contains(&high), "mode balance {high}/100");

    // the 0 degree projection fixes the column sums and with them the mean
    let truth = Image::filled(TOY_SIZE, 0.8);
    let pinned = sample(&model, &measured(&truth, &[0]), 100, 1);
    let right = pinned
        .samples
        .iter()
        .filter(|s| rms_to(s, 0.8) < rms_to(s, 0.2))
        .count();
    assert!(right >= 95, "{right}/100 conditional samples nearer the 0.8 mode");

    // conditioning never widens the posterior
    let designs: Vec<usize> = (0..16).collect();
    let four = [0, 4, 8, 12];
    let mut curve = Vec::new();
    for set in [
        MeasurementSet::new(space()),
        measured(&truth, &four),
        measured(&truth, &designs),
    ] {
        let v: Vec<f64> = (0..5)
            .map(|r| mean_pixel_variance(&sample(&model, &set, 20, 10 + r)))
            .collect();
        curve.push(mean_se(&v));
    }
    for w in curve.windows(2) {
        let ((a, sa), (b, sb)) = (w[0], w[1]);
        let tol = 2.0 * (sa * sa + sb * sb).sqrt();
        assert!(b <= a + tol, "variance rose from {a} to {b} (2 SE = {tol})");
    }
    assert!(curve[1].0 < curve[0].0, "{curve:?}");
}
