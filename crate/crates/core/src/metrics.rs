//! Image-quality metrics against a ground truth with data range 1.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

pub fn mse(est: &Image, truth: &Image) -> Result<f64> {
    est.same_size(truth)?;
    Ok(est
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / est.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(est: &Image, truth: &Image) -> Result<f64> {
    let m = mse(est, truth)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

const WIN: usize = 7;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WIN] {
    let h = (WIN / 2) as f64;
    let mut w = [0.0; WIN];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - h).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter restricted to windows fully inside the image.
fn filter_valid(data: &[f64], d: usize, w: &[f64; WIN]) -> Vec<f64> {
    let out = d + 1 - WIN;
    let mut tmp = vec![0.0; d * out];
    for r in 0..d {
        for c in 0..out {
            tmp[r * out + c] = (0..WIN).map(|k| w[k] * data[r * d + c + k]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for r in 0..out {
        for c in 0..out {
            res[r * out + c] = (0..WIN).map(|k| w[k] * tmp[(r + k) * out + c]).sum();
        }
    }
    res
}

/// Mean SSIM with a 7x7 Gaussian window (sigma 1.5) over the valid region.
/// Images smaller than the window fall back to a single global window.
pub fn ssim(est: &Image, truth: &Image) -> Result<f64> {
    est.same_size(truth)?;
    let d = est.size();
    let x = est.as_slice();
    let y = truth.as_slice();
    let local = |mx: f64, my: f64, vx: f64, vy: f64, cxy: f64| {
        ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    };
    if d < WIN {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        return Ok(local(mx, my, vx, vy, cxy));
    }
    let w = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, d, &w);
    let my = filter_valid(y, d, &w);
    let mxx = filter_valid(&xx, d, &w);
    let myy = filter_valid(&yy, d, &w);
    let mxy = filter_valid(&xy, d, &w);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            local(
                mx[i],
                my[i],
                mxx[i] - mx[i] * mx[i],
                myy[i] - my[i] * my[i],
                mxy[i] - mx[i] * my[i],
            )
        })
        .sum();
    Ok(total / n as f64)
}

pub fn compute_metrics(est: &Image, truth: &Image) -> Result<Metrics> {
    let m = mse(est, truth)?;
    Ok(Metrics {
        psnr: psnr(est, truth)?,
        rmse: m.sqrt(),
        ssim: ssim(est, truth)?,
    })
}
