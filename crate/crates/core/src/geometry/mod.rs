//! Linear forward operators: parallel-beam projections over a discrete angle
//! grid, and k-space row sampling of the centred 2-D Fourier transform.

mod fourier;
mod radon;

use serde::{Deserialize, Serialize};

pub use fourier::{fourier_row_forward, Fft2};
pub use radon::{radon_backproject, radon_project};

use crate::error::{DalError, Result};
use crate::image::Image;
use fourier::{pack_row, unpack_row};
use radon::SparseRows;

use num_complex::Complex64;
use rayon::prelude::*;

/// Equispaced candidate angles `{i * delta}` for `i = 0..count`, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleGrid {
    pub count: usize,
    pub delta_deg: f64,
}

impl AngleGrid {
    pub fn new(count: usize, delta_deg: f64) -> Result<Self> {
        let grid = AngleGrid { count, delta_deg };
        grid.validate()?;
        Ok(grid)
    }

    /// 180 angles one degree apart.
    pub fn full_degree() -> Self {
        AngleGrid {
            count: 180,
            delta_deg: 1.0,
        }
    }

    /// `count` angles evenly covering the half circle.
    pub fn uniform(count: usize) -> Result<Self> {
        Self::new(count, 180.0 / count.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(DalError::invalid("angle grid needs at least one angle"));
        }
        if !(self.delta_deg > 0.0) || self.count as f64 * self.delta_deg > 180.0 + 1e-9 {
            return Err(DalError::invalid(format!(
                "angle grid of {} x {} degrees does not fit in [0, 180)",
                self.count, self.delta_deg
            )));
        }
        Ok(())
    }

    pub fn angle(&self, index: usize) -> f64 {
        index as f64 * self.delta_deg
    }

    pub fn entries(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.angle(i)).collect()
    }
}

/// The set of candidate measurements the learner chooses from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpace {
    Angles(AngleGrid),
    /// Rows of the centred k-space of a `size x size` image.
    KspaceRows { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Radon,
    FourierRowMask,
}

impl DesignSpace {
    pub fn len(&self) -> usize {
        match self {
            DesignSpace::Angles(g) => g.count,
            DesignSpace::KspaceRows { size } => *size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            DesignSpace::Angles(_) => OperatorKind::Radon,
            DesignSpace::KspaceRows { .. } => OperatorKind::FourierRowMask,
        }
    }

    pub fn check_design(&self, design: usize) -> Result<()> {
        if design < self.len() {
            Ok(())
        } else {
            Err(DalError::InvalidDesign {
                design,
                size: self.len(),
            })
        }
    }
}

/// One observed measurement `y_psi`: `l` detector values for a projection, or
/// `2*d` interleaved reals (`d` complex values) for a k-space row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub design: usize,
    pub values: Vec<f64>,
}

impl Projection {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Radon { bins: usize, rows: Vec<SparseRows> },
    Fourier { fft: Fft2 },
}

/// A design space bound to an image size, with all per-design operators
/// prepared up front. Immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct Projector {
    space: DesignSpace,
    size: usize,
    inner: Inner,
}

impl Projector {
    /// Radon projectors use `l = d` detector bins.
    pub fn new(space: DesignSpace, size: usize) -> Result<Self> {
        Self::with_bins(space, size, size)
    }

    pub fn with_bins(space: DesignSpace, size: usize, bins: usize) -> Result<Self> {
        if size == 0 || bins == 0 {
            return Err(DalError::invalid("image size and bin count must be positive"));
        }
        let inner = match space {
            DesignSpace::Angles(grid) => {
                grid.validate()?;
                let rows = (0..grid.count)
                    .into_par_iter()
                    .map(|i| SparseRows::build(size, bins, grid.angle(i).to_radians()))
                    .collect();
                Inner::Radon { bins, rows }
            }
            DesignSpace::KspaceRows { size: rows } => {
                if rows != size {
                    return Err(DalError::DimensionMismatch {
                        expected: size,
                        got: rows,
                    });
                }
                Inner::Fourier {
                    fft: Fft2::new(size),
                }
            }
        };
        Ok(Projector { space, size, inner })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> OperatorKind {
        self.space.kind()
    }

    /// Length of one measurement vector.
    pub fn output_len(&self) -> usize {
        match &self.inner {
            Inner::Radon { bins, .. } => *bins,
            Inner::Fourier { .. } => 2 * self.size,
        }
    }

    pub fn fft(&self) -> Option<&Fft2> {
        match &self.inner {
            Inner::Fourier { fft } => Some(fft),
            Inner::Radon { .. } => None,
        }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.size() != self.size {
            return Err(DalError::DimensionMismatch {
                expected: self.size,
                got: img.size(),
            });
        }
        Ok(())
    }

    /// Forward model without input validation; `img` must have the
    /// projector's size.
    pub(crate) fn forward_unchecked(&self, design: usize, img: &Image) -> Vec<f64> {
        match &self.inner {
            Inner::Radon { bins, rows } => {
                let mut out = vec![0.0; *bins];
                rows[design].apply(img.as_slice(), &mut out);
                out
            }
            Inner::Fourier { fft } => pack_row(&fft.spectrum(img), self.size, design),
        }
    }

    pub fn forward(&self, design: usize, img: &Image) -> Result<Vec<f64>> {
        self.space.check_design(design)?;
        self.check_image(img)?;
        img.check_finite()?;
        Ok(self.forward_unchecked(design, img))
    }

    pub fn project(&self, design: usize, img: &Image) -> Result<Projection> {
        Ok(Projection {
            design,
            values: self.forward(design, img)?,
        })
    }

    /// `acc += scale * A_design^T values`
    pub fn adjoint_add(&self, design: usize, values: &[f64], scale: f64, acc: &mut Image) -> Result<()> {
        self.space.check_design(design)?;
        if values.len() != self.output_len() {
            return Err(DalError::DimensionMismatch {
                expected: self.output_len(),
                got: values.len(),
            });
        }
        self.check_image(acc)?;
        match &self.inner {
            Inner::Radon { rows, .. } => {
                rows[design].apply_adjoint_add(values, scale, acc.as_mut_slice());
            }
            Inner::Fourier { fft } => {
                let d = self.size;
                let mut spec = vec![Complex64::new(0.0, 0.0); d * d];
                spec[design * d..(design + 1) * d].copy_from_slice(&unpack_row(values));
                let back = fft.inverse_real_unnormalized(&spec);
                for (a, b) in acc.as_mut_slice().iter_mut().zip(back) {
                    *a += scale * b;
                }
            }
        }
        Ok(())
    }

    pub fn adjoint(&self, design: usize, values: &[f64]) -> Result<Image> {
        let mut out = Image::zeros(self.size);
        self.adjoint_add(design, values, 1.0, &mut out)?;
        Ok(out)
    }

    /// Applies the forward model at every design of the space. Element `i`
    /// is bit-identical to `forward(i, img)`.
    pub fn forward_all(&self, img: &Image) -> Result<Vec<Projection>> {
        self.check_image(img)?;
        img.check_finite()?;
        Ok(match &self.inner {
            Inner::Radon { bins, rows } => rows
                .par_iter()
                .enumerate()
                .map(|(design, r)| {
                    let mut values = vec![0.0; *bins];
                    r.apply(img.as_slice(), &mut values);
                    Projection { design, values }
                })
                .collect(),
            Inner::Fourier { fft } => {
                let spec = fft.spectrum(img);
                (0..self.size)
                    .map(|design| Projection {
                        design,
                        values: pack_row(&spec, self.size, design),
                    })
                    .collect()
            }
        })
    }

    /// Largest eigenvalue of `sum_{psi in designs} A_psi^T A_psi` by power
    /// iteration from a fixed start vector.
    pub fn normal_operator_norm(&self, designs: &[usize], iterations: usize) -> f64 {
        if designs.is_empty() {
            return 0.0;
        }
        let d = self.size;
        let mut v = Image::from_fn(d, |r, c| 1.0 + 0.01 * ((r * 31 + c * 17) % 13) as f64);
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let n = v.norm();
            if n == 0.0 {
                return 0.0;
            }
            v.scale(1.0 / n);
            let mut w = Image::zeros(d);
            for &psi in designs {
                let y = self.forward_unchecked(psi, &v);
                self.adjoint_add(psi, &y, 1.0, &mut w)
                    .expect("designs validated by caller");
            }
            lambda = v.dot(&w);
            v = w;
        }
        lambda
    }
}

/// Applies the forward model at every design; element `i` equals the single
/// design call.
pub fn batch_forward(img: &Image, projector: &Projector) -> Result<Vec<Projection>> {
    projector.forward_all(img)
}

#[cfg(test)]
mod tests;
