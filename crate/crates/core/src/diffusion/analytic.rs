use super::{Denoiser, NoiseSchedule};
use crate::error::{DalError, Result};
use crate::geometry::Fft2;
use crate::image::Image;

/// Exact noise predictor for an i.i.d. per-pixel Gaussian prior
/// `N(mu, tau^2)` in the diffusion domain. Useful as a training-free prior
/// with closed-form posteriors.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    pub mu: f64,
    pub tau: f64,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GaussianDenoiser {
    fn image_size(&self) -> Option<usize> {
        None
    }

    fn predict_eps(&self, xs: &[Image], t: usize) -> Result<Vec<Image>> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.tau * self.tau + 1.0 - ab;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xs.iter().map(|x| x.map(|v| b * (v - a * self.mu) / var)).collect())
    }

    fn id(&self) -> String {
        format!("gaussian(mu={},tau={})", self.mu, self.tau)
    }
}

/// Exact noise predictor for a stationary Gaussian random field with mean
/// `mu`, per-pixel standard deviation `tau` and a Matern-like spectrum of
/// correlation length `length` pixels (diffusion domain, periodic).
#[derive(Clone, Debug)]
pub struct GaussianFieldDenoiser {
    pub mu: f64,
    pub tau: f64,
    pub length: f64,
    pub size: usize,
    pub schedule: NoiseSchedule,
    /// Covariance eigenvalue per shifted frequency, row-major.
    eigenvalues: Vec<f64>,
    fft: Fft2,
}

impl GaussianFieldDenoiser {
    pub fn new(mu: f64, tau: f64, length: f64, size: usize, schedule: NoiseSchedule) -> Self {
        let h = (size / 2) as f64;
        let mut eig: Vec<f64> = (0..size * size)
            .map(|i| {
                let (r, c) = ((i / size) as f64 - h, (i % size) as f64 - h);
                let k2 = (r * r + c * c) * (length / size as f64).powi(2);
                (1.0 + 4.0 * std::f64::consts::PI.powi(2) * k2).powi(-2)
            })
            .collect();
        // pixel variance is the mean eigenvalue
        let scale = tau * tau * eig.len() as f64 / eig.iter().sum::<f64>();
        eig.iter_mut().for_each(|v| *v *= scale);
        GaussianFieldDenoiser {
            mu,
            tau,
            length,
            size,
            schedule,
            eigenvalues: eig,
            fft: Fft2::new(size),
        }
    }

    /// Posterior mean `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x: &Image, t: usize) -> Image {
        let ab = self.schedule.alpha_bar(t);
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        let mut spec = self.fft.spectrum(&x.map(|v| v - a * self.mu));
        for (z, &l) in spec.iter_mut().zip(&self.eigenvalues) {
            *z *= a * l / (ab * l + b2);
        }
        self.fft.image_from_spectrum(&spec).map(|v| v + self.mu)
    }
}

impl Denoiser for GaussianFieldDenoiser {
    fn image_size(&self) -> Option<usize> {
        Some(self.size)
    }

    fn predict_eps(&self, xs: &[Image], t: usize) -> Result<Vec<Image>> {
        self.schedule.check_t(t)?;
        if t == 0 {
            return Err(DalError::invalid("noise prediction needs t >= 1"));
        }
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        xs.iter()
            .map(|x| {
                if x.size() != self.size {
                    return Err(DalError::DimensionMismatch {
                        expected: self.size,
                        got: x.size(),
                    });
                }
                let x0 = self.posterior_mean(x, t);
                Ok(x.zip_map(&x0, |v, z| (v - a * z) / b))
            })
            .collect()
    }

    fn id(&self) -> String {
        format!(
            "gaussian-field(mu={},tau={},length={},size={})",
            self.mu, self.tau, self.length, self.size
        )
    }
}
