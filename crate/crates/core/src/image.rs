//! Square grayscale images.
//!
//! Pixels are stored row-major with row 0 at the top. Geometric operations
//! place pixel `(row, col)` at the physical position
//! `x = col - (d-1)/2`, `y = (d-1)/2 - row`, so the image centre is the origin
//! and the y axis points up.

use serde::{Deserialize, Serialize};

use crate::error::{DalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from a square buffer, rejecting non-finite pixels.
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_raw(size, size, data)
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width != height {
            return Err(DalError::NonSquare { width, height });
        }
        if data.len() != width * height {
            return Err(DalError::DimensionMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DalError::NonFinite("image pixels"));
        }
        Ok(Image { size: width, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self::filled(size, 0.0)
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Image {
            size,
            data: vec![value; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                data.push(f(row, col));
            }
        }
        Image { size, data }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.size + col] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DalError::NonFinite("image pixels"))
        }
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if self.size == other.size {
            Ok(())
        } else {
            Err(DalError::DimensionMismatch {
                expected: self.size,
                got: other.size,
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            size: self.size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        debug_assert_eq!(self.size, other.size);
        Image {
            size: self.size,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Image) {
        debug_assert_eq!(self.size, other.size);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Pixel-wise arithmetic mean of a non-empty set of equally sized images,
    /// accumulated as offsets from the first image so identical inputs give
    /// their common value exactly.
    pub fn mean_of(images: &[Image]) -> Result<Image> {
        let first = images.first().ok_or(DalError::Empty("image list"))?;
        let mut acc = Image::zeros(first.size);
        for img in images {
            first.same_size(img)?;
            for ((a, x), f) in acc.data.iter_mut().zip(&img.data).zip(&first.data) {
                *a += x - f;
            }
        }
        let k = images.len() as f64;
        for (a, f) in acc.data.iter_mut().zip(&first.data) {
            *a = f + *a / k;
        }
        Ok(acc)
    }

    /// Bilinear sample at fractional `(row, col)`; neighbours outside the
    /// image contribute zero.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let d = self.size as isize;
        let px = |r: isize, c: isize| -> f64 {
            if r >= 0 && r < d && c >= 0 && c < d {
                self.data[(r * d + c) as usize]
            } else {
                0.0
            }
        };
        (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1))
            + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1))
    }

    /// Rotates the content counter-clockwise by `degrees` about the image
    /// centre (bilinear, zero fill outside).
    pub fn rotate(&self, degrees: f64) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let h = (self.size as f64 - 1.0) / 2.0;
        Image::from_fn(self.size, |row, col| {
            let x = col as f64 - h;
            let y = h - row as f64;
            // inverse rotation maps the output position back into the source
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            self.sample_bilinear(h - ys, xs + h)
        })
    }

    /// Scales content by `factor` about the centre and keeps the central
    /// `size x size` window (bilinear, zero fill).
    pub fn zoom(&self, factor: f64) -> Image {
        let h = (self.size as f64 - 1.0) / 2.0;
        Image::from_fn(self.size, |row, col| {
            let r = (row as f64 - h) / factor + h;
            let c = (col as f64 - h) / factor + h;
            self.sample_bilinear(r, c)
        })
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn block_average(&self, factor: usize) -> Result<Image> {
        if factor < 2 {
            return Err(DalError::invalid(format!(
                "downsampling factor must be >= 2, got {factor}"
            )));
        }
        if self.size % factor != 0 {
            return Err(DalError::invalid(format!(
                "image size {} is not divisible by factor {factor}",
                self.size
            )));
        }
        let out = self.size / factor;
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Image::from_fn(out, |r, c| {
            let mut acc = 0.0;
            for dr in 0..factor {
                for dc in 0..factor {
                    acc += self.get(r * factor + dr, c * factor + dc);
                }
            }
            acc * norm
        }))
    }

    /// Adjoint of [`Image::block_average`]: spreads each low-resolution pixel
    /// uniformly (with weight `1/factor^2`) over its block.
    pub fn block_spread(&self, factor: usize) -> Image {
        let norm = 1.0 / (factor * factor) as f64;
        Image::from_fn(self.size * factor, |r, c| {
            self.get(r / factor, c / factor) * norm
        })
    }
}

/// Bilinear resampling of a `w x h` buffer to `out_w x out_h` using the
/// half-pixel-centre convention with edge clamping.
pub fn resample_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(matches!(
            Image::from_raw(3, 2, vec![0.0; 6]),
            Err(DalError::NonSquare { .. })
        ));
        assert!(matches!(
            Image::new(2, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(DalError::NonFinite(_))
        ));
    }

    #[test]
    fn rotate_quarter_turn_moves_pixels() {
        let mut img = Image::zeros(5);
        img.set(0, 2, 1.0); // top centre
        let r = img.rotate(90.0);
        // counter-clockwise: top moves to the left
        assert!((r.get(2, 0) - 1.0).abs() < 1e-12);
        assert!(r.get(0, 2).abs() < 1e-12);
    }

    #[test]
    fn block_average_and_spread_are_adjoint() {
        let x = Image::from_fn(8, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.1);
        let v = Image::from_fn(4, |r, c| (r as f64 - c as f64) * 0.3);
        let lhs = x.block_average(2).unwrap().dot(&v);
        let rhs = x.dot(&v.block_spread(2));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
