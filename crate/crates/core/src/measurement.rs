//! Simulated acquisition: noisy measurements, the growing measurement set,
//! and the low-resolution pre-scan.

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::archive::Archive;
use crate::error::{DalError, Result};
use crate::geometry::{DesignSpace, OperatorKind, Projection, Projector};
use crate::image::Image;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    /// Additive i.i.d. `N(0, sigma^2)` per value.
    Gaussian { sigma: f64 },
    /// Photon counting with `photons` incident quanta per ray (Beer-Lambert).
    Poisson { photons: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            NoiseModel::Poisson { photons } if photons > 0.0 && photons.is_finite() => Ok(()),
            other => Err(DalError::invalid(format!("invalid noise model {other:?}"))),
        }
    }

    /// Perturbs line-integral values in place.
    fn apply_line_integrals(&self, values: &mut [f64], rng: &mut Rng) {
        match *self {
            NoiseModel::None => {}
            NoiseModel::Gaussian { sigma } => {
                for v in values.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
            }
            NoiseModel::Poisson { photons } => {
                for v in values.iter_mut() {
                    let lambda = photons * (-*v).exp();
                    let count = if lambda.is_finite() && lambda > 0.0 {
                        Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    *v = -(count.max(1.0) / photons).ln();
                }
            }
        }
    }

    /// Perturbs image-domain intensities in place (pre-scan pixels).
    fn apply_intensities(&self, values: &mut [f64], rng: &mut Rng) {
        match *self {
            NoiseModel::Poisson { photons } => {
                for v in values.iter_mut() {
                    let lambda = photons * v.max(0.0);
                    let count = if lambda > 0.0 {
                        Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    *v = count / photons;
                }
            }
            other => other.apply_line_integrals(values, rng),
        }
    }
}

/// One simulated acquisition: the noiseless forward model at `design` plus
/// one noise draw from a stream seeded by `seed`.
pub fn measure(
    truth: &Image,
    design: usize,
    projector: &Projector,
    noise: NoiseModel,
    seed: u64,
) -> Result<Projection> {
    noise.validate()?;
    if matches!(noise, NoiseModel::Poisson { .. }) && projector.kind() != OperatorKind::Radon {
        return Err(DalError::UnsupportedOperator {
            op: "measure",
            reason: "Poisson noise is defined for line integrals only".into(),
        });
    }
    let mut projection = projector.project(design, truth)?;
    let mut r = rng::rng(seed);
    noise.apply_line_integrals(&mut projection.values, &mut r);
    Ok(projection)
}

/// Low-resolution overview scan: a block-averaged, noisy copy of the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreScan {
    pub factor: usize,
    pub image_lowres: Image,
    pub noise: NoiseModel,
}

impl PreScan {
    /// Residual `D x - lowres` of the block-average observation.
    pub fn residual(&self, x: &Image) -> Result<Image> {
        let low = x.block_average(self.factor)?;
        low.same_size(&self.image_lowres)?;
        Ok(low.zip_map(&self.image_lowres, |a, b| a - b))
    }
}

pub fn prescan_measure(truth: &Image, factor: usize, noise: NoiseModel, seed: u64) -> Result<PreScan> {
    noise.validate()?;
    let mut low = truth.block_average(factor)?;
    let mut r = rng::rng(seed);
    noise.apply_intensities(low.as_mut_slice(), &mut r);
    Ok(PreScan {
        factor,
        image_lowres: low,
        noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub projection: Projection,
    /// Acquisition step, starting at 1.
    pub step: usize,
}

impl Measurement {
    pub fn design(&self) -> usize {
        self.projection.design
    }
}

/// The data collected so far, ordered by acquisition step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub space: DesignSpace,
    entries: Vec<Measurement>,
    pub prescan: Option<PreScan>,
}

impl MeasurementSet {
    pub fn new(space: DesignSpace) -> Self {
        MeasurementSet {
            space,
            entries: Vec::new(),
            prescan: None,
        }
    }

    pub fn with_prescan(mut self, prescan: PreScan) -> Self {
        self.prescan = Some(prescan);
        self
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when there is nothing to condition on (no projections, no pre-scan).
    pub fn has_no_data(&self) -> bool {
        self.entries.is_empty() && self.prescan.is_none()
    }

    pub fn contains(&self, design: usize) -> bool {
        self.entries.iter().any(|m| m.design() == design)
    }

    pub fn designs(&self) -> Vec<usize> {
        self.entries.iter().map(|m| m.design()).collect()
    }

    /// Mask over the design space, `true` where already measured.
    pub fn measured_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.space.len()];
        for m in &self.entries {
            mask[m.design()] = true;
        }
        mask
    }

    /// Appends a projection with `step = previous max + 1` and returns the step.
    pub fn add(&mut self, projection: Projection) -> Result<usize> {
        self.space.check_design(projection.design)?;
        if self.contains(projection.design) {
            return Err(DalError::DuplicateDesign(projection.design));
        }
        if !projection.is_finite() {
            return Err(DalError::NonFinite("projection values"));
        }
        let step = self.entries.last().map_or(0, |m| m.step) + 1;
        self.entries.push(Measurement { projection, step });
        Ok(step)
    }

    /// The first `n` acquisitions (keeps the pre-scan).
    pub fn prefix(&self, n: usize) -> MeasurementSet {
        MeasurementSet {
            space: self.space,
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
            prescan: self.prescan.clone(),
        }
    }

    /// Content hash over designs, steps and the exact bits of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.space).unwrap_or_default());
        for m in &self.entries {
            h.update((m.design() as u64).to_le_bytes());
            h.update((m.step as u64).to_le_bytes());
            for v in &m.projection.values {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(p) = &self.prescan {
            h.update((p.factor as u64).to_le_bytes());
            for v in p.image_lowres.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Stores the set into `archive` under `prefix`, returning its metadata.
    pub fn store(&self, archive: &mut Archive, prefix: &str) -> serde_json::Value {
        let entries: Vec<_> = self
            .entries
            .iter()
            .map(|m| {
                let blob = format!("{prefix}/y/{}", m.step);
                archive.put(blob.clone(), m.projection.values.clone());
                json!({"design": m.design(), "step": m.step, "blob": blob})
            })
            .collect();
        let prescan = self.prescan.as_ref().map(|p| {
            let blob = format!("{prefix}/prescan");
            archive.put(blob.clone(), p.image_lowres.as_slice().to_vec());
            json!({
                "factor": p.factor,
                "noise": p.noise,
                "size": p.image_lowres.size(),
                "blob": blob,
            })
        });
        json!({"space": self.space, "entries": entries, "prescan": prescan})
    }

    pub fn load(meta: &serde_json::Value, archive: &Archive) -> Result<Self> {
        let bad = |what: &str| DalError::Format(format!("measurement set: bad `{what}`"));
        let space: DesignSpace = serde_json::from_value(meta["space"].clone())?;
        let mut set = MeasurementSet::new(space);
        for e in meta["entries"].as_array().ok_or_else(|| bad("entries"))? {
            let design = e["design"].as_u64().ok_or_else(|| bad("design"))? as usize;
            let step = e["step"].as_u64().ok_or_else(|| bad("step"))? as usize;
            let blob = e["blob"].as_str().ok_or_else(|| bad("blob"))?;
            let values = archive.get(blob)?.to_vec();
            set.space.check_design(design)?;
            if set.contains(design) {
                return Err(DalError::DuplicateDesign(design));
            }
            set.entries.push(Measurement {
                projection: Projection { design, values },
                step,
            });
        }
        if let Some(p) = meta.get("prescan").filter(|p| !p.is_null()) {
            let size = p["size"].as_u64().ok_or_else(|| bad("prescan.size"))? as usize;
            let blob = p["blob"].as_str().ok_or_else(|| bad("prescan.blob"))?;
            set.prescan = Some(PreScan {
                factor: p["factor"].as_u64().ok_or_else(|| bad("prescan.factor"))? as usize,
                noise: serde_json::from_value(p["noise"].clone())?,
                image_lowres: Image::new(size, archive.get(blob)?.to_vec())?,
            });
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut archive = Archive::new(serde_json::Value::Null);
        let meta = self.store(&mut archive, "set");
        archive.meta = json!({"kind": "measurement_set", "set": meta});
        archive.write(path)
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let archive = Archive::read(path)?;
        if archive.meta["kind"] != "measurement_set" {
            return Err(DalError::Format("archive does not hold a measurement set".into()));
        }
        Self::load(&archive.meta["set"], &archive)
    }
}

/// Functional form of [`MeasurementSet::add`].
pub fn add_measurement(mut set: MeasurementSet, projection: Projection) -> Result<MeasurementSet> {
    set.add(projection)?;
    Ok(set)
}

/// Draws a uniform random subset of `count` indices out of `0..n` (partial
/// Fisher-Yates), in draw order.
pub(crate) fn sample_indices(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let count = count.min(n);
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AngleGrid;

    fn projector(d: usize) -> Projector {
        Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), d).unwrap()
    }

    fn phantom(d: usize) -> Image {
        Image::from_fn(d, |r, c| ((r * 3 + c * 5) % 7) as f64 / 7.0)
    }

    #[test]
    fn noiseless_measure_equals_forward() {
        let p = projector(16);
        let x = phantom(16);
        let y = measure(&x, 33, &p, NoiseModel::None, 1).unwrap();
        assert_eq!(y.values, p.forward_all(&x).unwrap()[33].values);
        assert!(measure(&x, 180, &p, NoiseModel::None, 1).is_err());
    }

    #[test]
    fn measure_is_deterministic_per_seed() {
        let p = projector(16);
        let x = phantom(16);
        let noise = NoiseModel::Gaussian { sigma: 0.05 };
        let a = measure(&x, 3, &p, noise, 42).unwrap();
        let b = measure(&x, 3, &p, noise, 42).unwrap();
        let c = measure(&x, 3, &p, noise, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_noise_moments() {
        let p = projector(8);
        let x = phantom(8);
        let clean = p.forward(0, &x).unwrap();
        let n = 10_000;
        let sigma = 0.05;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let y = measure(&x, 0, &p, NoiseModel::Gaussian { sigma }, s as u64).unwrap();
                y.values.iter().zip(&clean).map(|(a, b)| a - b).collect()
            })
            .collect();
        let bin = 3;
        let mean = draws.iter().map(|v| v[bin]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v[bin] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - sigma).abs() / sigma < 0.05);
        // independent bins: off-diagonal covariance small
        for (i, j) in [(0, 1), (2, 5), (4, 7)] {
            let cov = draws.iter().map(|v| v[i] * v[j]).sum::<f64>() / n as f64;
            assert!(cov.abs() < 5e-3, "cov({i},{j}) = {cov}");
        }
    }

    #[test]
    fn poisson_noise_is_unbiased_at_high_dose() {
        let p = projector(8);
        let x = phantom(8).map(|v| v * 0.2);
        let clean = p.forward(10, &x).unwrap();
        let bin = 4;
        let n = 10_000;
        let mean = (0..n)
            .map(|s| {
                measure(&x, 10, &p, NoiseModel::Poisson { photons: 1e5 }, s as u64)
                    .unwrap()
                    .values[bin]
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - clean[bin]).abs() / clean[bin] < 0.01);
    }

    #[test]
    fn prescan_block_averages() {
        assert!(prescan_measure(&Image::filled(8, 0.5), 1, NoiseModel::None, 0).is_err());
        assert!(prescan_measure(&Image::filled(9, 0.5), 2, NoiseModel::None, 0).is_err());
        let p = prescan_measure(&Image::filled(16, 0.5), 4, NoiseModel::None, 0).unwrap();
        assert_eq!(p.image_lowres, Image::filled(4, 0.5));
        let checker = Image::from_fn(8, |r, c| ((r + c) % 2) as f64);
        let p = prescan_measure(&checker, 2, NoiseModel::None, 0).unwrap();
        // block-average oracle: every 2x2 block of a period-2 checkerboard
        // holds exactly two ones
        for v in p.image_lowres.as_slice() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn add_measurement_tracks_steps() {
        let space = DesignSpace::Angles(AngleGrid::full_degree());
        let y = |d: usize| Projection {
            design: d,
            values: vec![0.0; 4],
        };
        let set = add_measurement(MeasurementSet::new(space), y(10)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries()[0].step, 1);
        assert!(matches!(
            add_measurement(set.clone(), y(10)),
            Err(DalError::DuplicateDesign(10))
        ));
        let set = add_measurement(add_measurement(set, y(3)).unwrap(), y(7)).unwrap();
        let steps: Vec<_> = set.entries().iter().map(|m| (m.design(), m.step)).collect();
        assert_eq!(steps, vec![(10, 1), (3, 2), (7, 3)]);
    }

    #[test]
    fn set_round_trips_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dal");
        let p = projector(8);
        let x = phantom(8);
        let mut set = MeasurementSet::new(*p.space())
            .with_prescan(prescan_measure(&x, 2, NoiseModel::Gaussian { sigma: 0.1 }, 5).unwrap());
        for (i, d) in [4usize, 90, 17].iter().enumerate() {
            set.add(measure(&x, *d, &p, NoiseModel::Gaussian { sigma: 0.01 }, i as u64).unwrap())
                .unwrap();
        }
        set.save(&path).unwrap();
        let back = MeasurementSet::open(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.hash(), set.hash());
    }
}
