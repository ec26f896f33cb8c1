//! The measurement-fidelity loss shared by iterative reconstruction, the
//! ensemble/SWAG baselines and diffusion data consistency:
//!
//! ```text
//! L(x) = s * sum_{i in S} ||A_i x - y_i||^2 + lambda_pre * ||D x - y_pre||^2
//! ```
//!
//! where `S` is either every measurement or a minibatch and `s` rescales a
//! minibatch to an unbiased estimate of the full sum.

use crate::error::{DalError, Result};
use crate::geometry::Projector;
use crate::image::Image;
use crate::measurement::MeasurementSet;

pub struct DataTerm<'a> {
    projector: &'a Projector,
    set: &'a MeasurementSet,
    prescan_weight: f64,
}

impl<'a> DataTerm<'a> {
    pub fn new(projector: &'a Projector, set: &'a MeasurementSet, prescan_weight: f64) -> Result<Self> {
        if projector.space() != &set.space {
            return Err(DalError::invalid(
                "measurement set and projector use different design spaces",
            ));
        }
        for m in set.entries() {
            if m.projection.values.len() != projector.output_len() {
                return Err(DalError::DimensionMismatch {
                    expected: projector.output_len(),
                    got: m.projection.values.len(),
                });
            }
        }
        if let Some(p) = &set.prescan {
            if p.image_lowres.size() * p.factor != projector.image_size() {
                return Err(DalError::DimensionMismatch {
                    expected: projector.image_size(),
                    got: p.image_lowres.size() * p.factor,
                });
            }
        }
        if !(prescan_weight >= 0.0) {
            return Err(DalError::invalid("prescan weight must be >= 0"));
        }
        Ok(DataTerm {
            projector,
            set,
            prescan_weight,
        })
    }

    pub fn projector(&self) -> &Projector {
        self.projector
    }

    pub fn set(&self) -> &MeasurementSet {
        self.set
    }

    fn prescan_active(&self) -> bool {
        self.set.prescan.is_some() && self.prescan_weight > 0.0
    }

    /// True when the loss is identically zero.
    pub fn is_empty(&self) -> bool {
        self.set.is_empty() && !self.prescan_active()
    }

    pub fn num_entries(&self) -> usize {
        self.set.len()
    }

    /// Full-batch loss.
    pub fn loss(&self, x: &Image) -> f64 {
        let mut total = 0.0;
        for m in self.set.entries() {
            let ax = self.projector.forward_unchecked(m.design(), x);
            total += ax
                .iter()
                .zip(&m.projection.values)
                .map(|(a, y)| (a - y).powi(2))
                .sum::<f64>();
        }
        total + self.prescan_loss(x)
    }

    fn prescan_loss(&self, x: &Image) -> f64 {
        match &self.set.prescan {
            Some(p) if self.prescan_weight > 0.0 => {
                self.prescan_weight * p.residual(x).expect("sizes checked").norm_sq()
            }
            _ => 0.0,
        }
    }

    /// Loss over the entries in `subset` (all when `None`), data part scaled
    /// by `scale`, with its gradient accumulated into `grad`.
    pub fn loss_grad(&self, x: &Image, subset: Option<&[usize]>, scale: f64, grad: &mut Image) -> f64 {
        let entries = self.set.entries();
        let mut total = 0.0;
        let mut visit = |i: usize| {
            let m = &entries[i];
            let mut r = self.projector.forward_unchecked(m.design(), x);
            for (a, y) in r.iter_mut().zip(&m.projection.values) {
                *a -= y;
            }
            total += scale * r.iter().map(|v| v * v).sum::<f64>();
            self.projector
                .adjoint_add(m.design(), &r, 2.0 * scale, grad)
                .expect("dimensions checked");
        };
        match subset {
            Some(s) => s.iter().for_each(|&i| visit(i)),
            None => (0..entries.len()).for_each(&mut visit),
        }
        if let Some(p) = self.set.prescan.as_ref().filter(|_| self.prescan_weight > 0.0) {
            let r = p.residual(x).expect("sizes checked");
            total += self.prescan_weight * r.norm_sq();
            grad.axpy(2.0 * self.prescan_weight, &r.block_spread(p.factor));
        }
        total
    }

    /// Lipschitz constant of the full-batch gradient, `2 * lambda_max` of the
    /// normal operator, by power iteration.
    pub fn lipschitz(&self, iterations: usize) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.projector.image_size();
        let mut v = Image::from_fn(d, |r, c| 1.0 + 0.01 * ((r * 31 + c * 17) % 13) as f64);
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let n = v.norm();
            if n == 0.0 {
                return 0.0;
            }
            v.scale(1.0 / n);
            let mut w = Image::zeros(d);
            for m in self.set.entries() {
                let y = self.projector.forward_unchecked(m.design(), &v);
                self.projector
                    .adjoint_add(m.design(), &y, 1.0, &mut w)
                    .expect("dimensions checked");
            }
            if let Some(p) = self.set.prescan.as_ref().filter(|_| self.prescan_weight > 0.0) {
                let low = v.block_average(p.factor).expect("sizes checked");
                w.axpy(self.prescan_weight, &low.block_spread(p.factor));
            }
            lambda = v.dot(&w);
            v = w;
        }
        2.0 * lambda
    }

    /// `||A x - y|| / ||y||` over all projections.
    pub fn relative_residual(&self, x: &Image) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for m in self.set.entries() {
            let ax = self.projector.forward_unchecked(m.design(), x);
            for (a, y) in ax.iter().zip(&m.projection.values) {
                num += (a - y).powi(2);
                den += y * y;
            }
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngleGrid, DesignSpace};
    use crate::measurement::{measure, prescan_measure, NoiseModel};
    use rand::Rng as _;

    #[test]
    fn gradient_matches_finite_differences() {
        let d = 8;
        let p = Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), d).unwrap();
        let mut r = crate::rng::rng(3);
        let truth = Image::from_fn(d, |_, _| r.gen::<f64>());
        let mut set = MeasurementSet::new(*p.space())
            .with_prescan(prescan_measure(&truth, 2, NoiseModel::None, 0).unwrap());
        for design in [0, 60, 125] {
            set.add(measure(&truth, design, &p, NoiseModel::None, 0).unwrap()).unwrap();
        }
        let term = DataTerm::new(&p, &set, 0.7).unwrap();
        let x = Image::from_fn(d, |_, _| r.gen::<f64>());
        let mut grad = Image::zeros(d);
        let loss = term.loss_grad(&x, None, 1.0, &mut grad);
        assert!((loss - term.loss(&x)).abs() < 1e-12 * loss.max(1.0));
        let h = 1e-5;
        for _ in 0..20 {
            let i = r.gen_range(0..d * d);
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (term.loss(&xp) - term.loss(&xm)) / (2.0 * h);
            let g = grad.as_slice()[i];
            assert!((fd - g).abs() / g.abs().max(1e-8) < 1e-4, "pixel {i}: fd {fd} vs {g}");
        }
    }
}
