//! Centred 2-D discrete Fourier transform and the k-space row operator.
//!
//! Spectra are stored fft-shifted: index `i` along either axis holds
//! frequency `i - d/2`, so row `d/2` is the zero-frequency row. The forward
//! transform is unnormalised (DC of a constant `c` is `c * d^2`).

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{DalError, Result};
use crate::image::Image;

#[derive(Clone)]
pub struct Fft2 {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("size", &self.size).finish()
    }
}

impl Fft2 {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Natural (unshifted) index of shifted position `i`.
    #[inline]
    fn unshift(&self, i: usize) -> usize {
        (i + self.size - self.size / 2) % self.size
    }

    /// Shifted index of the frequency that mirrors shifted position `i`
    /// (`k -> -k`), used for Hermitian symmetry of real images.
    #[inline]
    pub fn mirror(&self, i: usize) -> usize {
        let d = self.size;
        let nat = self.unshift(i);
        let mirrored = (d - nat) % d;
        (mirrored + d / 2) % d
    }

    fn transform_2d(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let d = self.size;
        for row in data.chunks_exact_mut(d) {
            plan.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); d];
        for c in 0..d {
            for r in 0..d {
                col[r] = data[r * d + c];
            }
            plan.process(&mut col);
            for r in 0..d {
                data[r * d + c] = col[r];
            }
        }
    }

    /// Shifted spectrum of a real image, row-major.
    pub fn spectrum(&self, img: &Image) -> Vec<Complex64> {
        let d = self.size;
        let mut natural: Vec<Complex64> = img
            .as_slice()
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.transform_2d(&mut natural, &self.forward);
        let mut shifted = vec![Complex64::new(0.0, 0.0); d * d];
        for r in 0..d {
            let nr = self.unshift(r);
            for c in 0..d {
                shifted[r * d + c] = natural[nr * d + self.unshift(c)];
            }
        }
        shifted
    }

    /// Unnormalised inverse of a shifted spectrum; returns the real part.
    pub fn inverse_real_unnormalized(&self, shifted: &[Complex64]) -> Vec<f64> {
        let d = self.size;
        let mut natural = vec![Complex64::new(0.0, 0.0); d * d];
        for r in 0..d {
            let nr = self.unshift(r);
            for c in 0..d {
                natural[nr * d + self.unshift(c)] = shifted[r * d + c];
            }
        }
        self.transform_2d(&mut natural, &self.inverse);
        natural.into_iter().map(|z| z.re).collect()
    }

    /// Inverse of [`Fft2::spectrum`] (real part).
    pub fn image_from_spectrum(&self, shifted: &[Complex64]) -> Image {
        let norm = 1.0 / (self.size * self.size) as f64;
        let data = self
            .inverse_real_unnormalized(shifted)
            .into_iter()
            .map(|v| v * norm)
            .collect();
        Image::new(self.size, data).expect("inverse transform of a finite spectrum")
    }
}

/// Packs one spectrum row as interleaved `(re, im)` reals.
pub(crate) fn pack_row(spectrum: &[Complex64], size: usize, row: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * size);
    for z in &spectrum[row * size..(row + 1) * size] {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

pub(crate) fn unpack_row(values: &[f64]) -> Vec<Complex64> {
    values
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Selected row of the centred spectrum of `img`, as `2*d` interleaved reals.
pub fn fourier_row_forward(img: &Image, row: usize) -> Result<Vec<f64>> {
    let d = img.size();
    if row >= d {
        return Err(DalError::InvalidDesign { design: row, size: d });
    }
    img.check_finite()?;
    let fft = Fft2::new(d);
    Ok(pack_row(&fft.spectrum(img), d, row))
}
