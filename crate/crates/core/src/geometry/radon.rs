//! Parallel-beam Radon projector, Joseph discretisation.
//!
//! A ray at detector offset `s` for angle `theta` is the line
//! `p(t) = s*n + t*r` with `n = (cos, sin)` and `r = (-sin, cos)`. The ray is
//! driven along whichever image axis it crosses more steeply; at every row
//! (or column) it is sampled with linear interpolation between the two
//! neighbouring pixels and weighted by the path length per step. The
//! projector is therefore an explicit sparse matrix whose transpose is the
//! exact adjoint.

use crate::error::{DalError, Result};
use crate::image::Image;

/// Visits every non-zero `(bin, pixel, weight)` entry of the projection
/// matrix for one angle. Entries are produced in a fixed order so that all
/// consumers accumulate identically.
pub(crate) fn for_each_weight(
    size: usize,
    bins: usize,
    theta: f64,
    mut f: impl FnMut(usize, usize, f64),
) {
    let (sin, cos) = theta.sin_cos();
    let h = (size as f64 - 1.0) / 2.0;
    let spacing = size as f64 / bins as f64;
    let hb = (bins as f64 - 1.0) / 2.0;
    let d = size as isize;
    for bin in 0..bins {
        let s = (bin as f64 - hb) * spacing;
        if cos.abs() >= sin.abs() {
            let w = spacing / cos.abs();
            for row in 0..size {
                let y = h - row as f64;
                let t = (y - s * sin) / cos;
                let col = s * cos - t * sin + h;
                let c0 = col.floor();
                let frac = col - c0;
                let c0 = c0 as isize;
                if c0 >= 0 && c0 < d && frac < 1.0 {
                    let wv = (1.0 - frac) * w;
                    if wv != 0.0 {
                        f(bin, row * size + c0 as usize, wv);
                    }
                }
                if c0 + 1 >= 0 && c0 + 1 < d && frac > 0.0 {
                    f(bin, row * size + (c0 + 1) as usize, frac * w);
                }
            }
        } else {
            let w = spacing / sin.abs();
            for col in 0..size {
                let x = col as f64 - h;
                let t = (s * cos - x) / sin;
                let y = s * sin + t * cos;
                let rowf = h - y;
                let r0 = rowf.floor();
                let frac = rowf - r0;
                let r0 = r0 as isize;
                if r0 >= 0 && r0 < d && frac < 1.0 {
                    let wv = (1.0 - frac) * w;
                    if wv != 0.0 {
                        f(bin, r0 as usize * size + col, wv);
                    }
                }
                if r0 + 1 >= 0 && r0 + 1 < d && frac > 0.0 {
                    f(bin, (r0 + 1) as usize * size + col, frac * w);
                }
            }
        }
    }
}

/// Projection matrix of a single angle in compressed-row form.
#[derive(Clone, Debug)]
pub(crate) struct SparseRows {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub(crate) fn build(size: usize, bins: usize, theta: f64) -> Self {
        let mut row_ptr = vec![0usize; bins + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut current = 0usize;
        for_each_weight(size, bins, theta, |bin, pix, w| {
            while current < bin {
                current += 1;
                row_ptr[current] = cols.len();
            }
            cols.push(pix as u32);
            vals.push(w);
        });
        while current < bins {
            current += 1;
            row_ptr[current] = cols.len();
        }
        SparseRows { row_ptr, cols, vals }
    }

    pub(crate) fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (b, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[b], self.row_ptr[b + 1]);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *o = acc;
        }
    }

    /// `acc += scale * A^T v`
    pub(crate) fn apply_adjoint_add(&self, v: &[f64], scale: f64, acc: &mut [f64]) {
        for (b, &vb) in v.iter().enumerate() {
            if vb == 0.0 {
                continue;
            }
            let sv = scale * vb;
            for k in self.row_ptr[b]..self.row_ptr[b + 1] {
                acc[self.cols[k] as usize] += self.vals[k] * sv;
            }
        }
    }
}

fn check_angle(angle_deg: f64) -> Result<()> {
    if !(0.0..180.0).contains(&angle_deg) {
        return Err(DalError::invalid(format!(
            "projection angle must lie in [0, 180) degrees, got {angle_deg}"
        )));
    }
    Ok(())
}

/// Line integrals of `img` along the rays of one angle (degrees).
pub fn radon_project(img: &Image, angle_deg: f64, bins: usize) -> Result<Vec<f64>> {
    check_angle(angle_deg)?;
    if bins == 0 {
        return Err(DalError::invalid("detector needs at least one bin"));
    }
    img.check_finite()?;
    let x = img.as_slice();
    let mut out = vec![0.0; bins];
    let mut current = usize::MAX;
    let mut acc = 0.0;
    for_each_weight(img.size(), bins, angle_deg.to_radians(), |bin, pix, w| {
        if bin != current {
            if current != usize::MAX {
                out[current] = acc;
            }
            current = bin;
            acc = 0.0;
        }
        acc += w * x[pix];
    });
    if current != usize::MAX {
        out[current] = acc;
    }
    Ok(out)
}

/// Exact adjoint of [`radon_project`]; the bin count is `values.len()`.
pub fn radon_backproject(values: &[f64], angle_deg: f64, size: usize) -> Result<Image> {
    check_angle(angle_deg)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DalError::NonFinite("projection values"));
    }
    let mut out = vec![0.0; size * size];
    for_each_weight(size, values.len(), angle_deg.to_radians(), |bin, pix, w| {
        out[pix] += w * values[bin];
    });
    Image::new(size, out)
}
