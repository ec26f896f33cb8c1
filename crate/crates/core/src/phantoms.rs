//! Synthetic phantoms, image-directory ingestion and train/test splitting.
//!
//! Generators composite shapes either with convex "over" blending or as
//! `bg + (1 - bg) (1 - prod(1 - a_i g_i))` with amplitudes and profiles in
//! `[0, 1]`, so outputs stay inside `[0, 1]` without clamping.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DalError, Result};
use crate::image::{resample_bilinear, Image};
use crate::rng::{self, derived_rng, stream, Rng};

/// Sub-pixel samples per axis used for anti-aliased coverage.
const SUPERSAMPLE: usize = 4;

const FIBER_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Axis-aligned rectangles plus thin horizontal/vertical wire stripes.
    Manhattan {
        rectangles: usize,
        wires: usize,
        /// Rectangle side length range as a fraction of `d`.
        rect_size: [f64; 2],
        /// Wire thickness range in pixels.
        wire_width: [f64; 2],
        background: f64,
    },
    /// Elongated ellipses sharing one dominant orientation. `kappa` is the
    /// von Mises concentration of the doubled (axial) angle; `inf` aligns
    /// every fiber exactly.
    Fiber {
        fibers: usize,
        orientation_deg: f64,
        kappa: f64,
        /// Major axis length range as a fraction of `d`.
        length: [f64; 2],
        /// Minor axis length range in pixels.
        width: [f64; 2],
        background: f64,
    },
    /// Smooth isotropic Gaussian blobs.
    Blob {
        blobs: usize,
        /// Standard deviation range as a fraction of `d`.
        radius: [f64; 2],
        background: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    #[serde(flatten)]
    pub family: Family,
}

impl PhantomSpec {
    pub fn manhattan(size: usize) -> Self {
        PhantomSpec {
            size,
            family: Family::Manhattan {
                rectangles: 5,
                wires: 4,
                rect_size: [0.15, 0.45],
                wire_width: [1.0, 2.0],
                background: 0.1,
            },
        }
    }

    pub fn fiber(size: usize) -> Self {
        PhantomSpec {
            size,
            family: Family::Fiber {
                fibers: 10,
                orientation_deg: 30.0,
                kappa: 16.0,
                length: [0.5, 0.9],
                width: [1.5, 3.5],
                background: 0.15,
            },
        }
    }

    pub fn blob(size: usize) -> Self {
        PhantomSpec {
            size,
            family: Family::Blob {
                blobs: 8,
                radius: [0.06, 0.16],
                background: 0.1,
            },
        }
    }

    /// Default spec for a family name (`manhattan`, `fiber`, `blob`).
    pub fn by_name(name: &str, size: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "manhattan" => Ok(Self::manhattan(size)),
            "fiber" => Ok(Self::fiber(size)),
            "blob" => Ok(Self::blob(size)),
            other => Err(DalError::invalid(format!("unknown phantom family '{other}'"))),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::Manhattan { .. } => "manhattan",
            Family::Fiber { .. } => "fiber",
            Family::Blob { .. } => "blob",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(DalError::invalid(format!("phantom size must be >= 2, got {}", self.size)));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DalError::invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        let range = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1] {
                Ok(())
            } else {
                Err(DalError::invalid(format!("{name} range must satisfy 0 < lo <= hi, got {r:?}")))
            }
        };
        match &self.family {
            Family::Manhattan { rect_size, wire_width, background, .. } => {
                unit("background", *background)?;
                range("rect_size", *rect_size)?;
                range("wire_width", *wire_width)
            }
            Family::Fiber { orientation_deg, kappa, length, width, background, .. } => {
                unit("background", *background)?;
                if !orientation_deg.is_finite() {
                    return Err(DalError::invalid("fiber orientation must be finite"));
                }
                if kappa.is_nan() || *kappa < 0.0 {
                    return Err(DalError::invalid(format!("kappa must be >= 0, got {kappa}")));
                }
                range("length", *length)?;
                range("width", *width)
            }
            Family::Blob { radius, background, .. } => {
                unit("background", *background)?;
                range("radius", *radius)
            }
        }
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut r = rng::rng(seed);
    let d = spec.size;
    let img = match &spec.family {
        Family::Manhattan { rectangles, wires, rect_size, wire_width, background } => {
            let mut img = Image::filled(d, *background);
            let df = d as f64;
            for _ in 0..*rectangles {
                let w = uniform(&mut r, *rect_size) * df;
                let h = uniform(&mut r, *rect_size) * df;
                let x0 = r.gen::<f64>() * (df - w).max(0.0);
                let y0 = r.gen::<f64>() * (df - h).max(0.0);
                let value = uniform(&mut r, [0.3, 1.0]);
                paint(&mut img, value, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
            }
            for _ in 0..*wires {
                let thick = uniform(&mut r, *wire_width);
                let along = uniform(&mut r, [0.4, 1.0]) * df;
                let start = r.gen::<f64>() * (df - along);
                let offset = r.gen::<f64>() * (df - thick);
                let horizontal = r.gen::<bool>();
                let value = uniform(&mut r, [0.6, 1.0]);
                paint(&mut img, value, |x, y| {
                    let (a, b) = if horizontal { (x, y) } else { (y, x) };
                    a >= start && a < start + along && b >= offset && b < offset + thick
                });
            }
            img
        }
        Family::Fiber { fibers, orientation_deg, kappa, length, width, background } => {
            // fibers are packed side by side: a candidate touching (within one
            // pixel) an already placed fiber is redrawn, and dropped after
            // FIBER_ATTEMPTS tries
            let mut img = Image::filled(d, *background);
            let mut occupied = vec![false; d * d];
            let df = d as f64;
            for _ in 0..*fibers {
                for _ in 0..FIBER_ATTEMPTS {
                    let theta = orientation_deg.to_radians() + 0.5 * von_mises(&mut r, *kappa);
                    let a = 0.5 * uniform(&mut r, *length) * df;
                    let b = 0.5 * uniform(&mut r, *width);
                    let cx = uniform(&mut r, [0.1, 0.9]) * df;
                    let cy = uniform(&mut r, [0.1, 0.9]) * df;
                    let value = uniform(&mut r, [0.55, 0.95]);
                    let (s, c) = theta.sin_cos();
                    // pixel coordinates have y pointing down; flip to keep
                    // angles counter-clockwise from the x axis
                    let inside = |x: f64, y: f64| {
                        let dx = x - cx;
                        let dy = cy - y;
                        let u = c * dx + s * dy;
                        let v = -s * dx + c * dy;
                        (u / a).powi(2) + (v / b).powi(2) <= 1.0
                    };
                    let mut cover = Vec::new();
                    for_coverage(d, &inside, |row, col, w| cover.push((row, col, w)));
                    let clash = cover.iter().any(|&(row, col, _)| {
                        (row.saturating_sub(1)..(row + 2).min(d))
                            .any(|rr| (col.saturating_sub(1)..(col + 2).min(d)).any(|cc| occupied[rr * d + cc]))
                    });
                    if clash {
                        continue;
                    }
                    for (row, col, w) in cover {
                        occupied[row * d + col] = true;
                        let v = img.get(row, col);
                        img.set(row, col, (1.0 - w) * v + w * value);
                    }
                    break;
                }
            }
            img
        }
        Family::Blob { blobs, radius, background } => {
            let df = d as f64;
            let mut keep = Image::filled(d, 1.0);
            for _ in 0..*blobs {
                let sigma = uniform(&mut r, *radius) * df;
                let cx = uniform(&mut r, [0.15, 0.85]) * df;
                let cy = uniform(&mut r, [0.15, 0.85]) * df;
                let amp = uniform(&mut r, [0.3, 0.9]);
                let inv = 1.0 / (2.0 * sigma * sigma);
                for row in 0..d {
                    for col in 0..d {
                        let dx = col as f64 + 0.5 - cx;
                        let dy = row as f64 + 0.5 - cy;
                        let g = (-(dx * dx + dy * dy) * inv).exp();
                        let k = keep.get(row, col);
                        keep.set(row, col, k * (1.0 - amp * g));
                    }
                }
            }
            let bg = *background;
            keep.map(|k| bg + (1.0 - bg) * (1.0 - k))
        }
    };
    debug_assert!(img.min() >= 0.0 && img.max() <= 1.0);
    Ok(img)
}

fn uniform(r: &mut Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * r.gen::<f64>()
}

/// Blends `value` over the image with weight equal to the supersampled
/// coverage of `inside` (coordinates in pixels, origin top-left).
fn paint(img: &mut Image, value: f64, inside: impl Fn(f64, f64) -> bool) {
    let d = img.size();
    for_coverage(d, &inside, |row, col, w| {
        let v = img.get(row, col);
        img.set(row, col, (1.0 - w) * v + w * value);
    });
}

/// Calls `f(row, col, coverage)` for every pixel partially inside the shape.
fn for_coverage(d: usize, inside: &impl Fn(f64, f64) -> bool, mut f: impl FnMut(usize, usize, f64)) {
    let n = SUPERSAMPLE as f64;
    for row in 0..d {
        for col in 0..d {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) / n;
                    let y = row as f64 + (sy as f64 + 0.5) / n;
                    if inside(x, y) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                f(row, col, hits as f64 / (n * n));
            }
        }
    }
}

/// Von Mises draw on `(-pi, pi]` (Best and Fisher rejection sampler).
/// Very large concentrations use the Gaussian limit `N(0, 1/kappa)`.
fn von_mises(r: &mut Rng, kappa: f64) -> f64 {
    if kappa.is_infinite() {
        return 0.0;
    }
    if kappa < 1e-8 {
        return PI * (2.0 * r.gen::<f64>() - 1.0);
    }
    if kappa > 1e4 {
        let z: f64 = StandardNormal.sample(r);
        return z / kappa.sqrt();
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let s = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = r.gen();
        let u2: f64 = r.gen();
        let u3: f64 = r.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + s * z) / (s + z);
        let c = kappa * (s - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let angle = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { angle } else { -angle };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orientation {
    /// Dominant structure direction in degrees, counter-clockwise from the
    /// x axis, in `[0, 180)`.
    pub degrees: f64,
    /// `(l1 - l2) / (l1 + l2)` of the summed structure tensor; 0 for
    /// isotropic or flat images.
    pub coherence: f64,
}

/// Global structure-tensor orientation estimate from Scharr derivatives
/// (plain central differences bias thin structures toward the diagonals).
/// Structures run perpendicular to the dominant gradient direction.
pub fn structure_orientation(img: &Image) -> Orientation {
    let d = img.size();
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for row in 1..d.saturating_sub(1) {
        for col in 1..d - 1 {
            let px = |dr: usize, dc: usize| img.get(row + dr - 1, col + dc - 1);
            let gx = (3.0 * (px(0, 2) - px(0, 0)) + 10.0 * (px(1, 2) - px(1, 0)) + 3.0 * (px(2, 2) - px(2, 0)))
                / 32.0;
            let gy = (3.0 * (px(0, 0) - px(2, 0)) + 10.0 * (px(0, 1) - px(2, 1)) + 3.0 * (px(0, 2) - px(2, 2)))
                / 32.0;
            jxx += gx * gx;
            jyy += gy * gy;
            jxy += gx * gy;
        }
    }
    let trace = jxx + jyy;
    if trace <= 0.0 {
        return Orientation { degrees: 0.0, coherence: 0.0 };
    }
    let diff = jxx - jyy;
    let gradient = 0.5 * (2.0 * jxy).atan2(diff);
    let degrees = (gradient.to_degrees() + 90.0).rem_euclid(180.0);
    let coherence = (diff * diff + 4.0 * jxy * jxy).sqrt() / trace;
    Orientation { degrees, coherence }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: PhantomSpec, seed: u64 },
    Directory { path: String },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub source: DatasetSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images.first().map_or(0, Image::size)
    }

    /// SHA-256 over ids and little-endian pixel bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size() as u64).to_le_bytes());
        for (id, img) in self.ids.iter().zip(&self.images) {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
            for v in img.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, id: &str) -> Option<&Image> {
        self.ids.iter().position(|i| i == id).map(|i| &self.images[i])
    }

    /// Images for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Image>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| DalError::invalid(format!("unknown dataset id '{id}'")))
            })
            .collect()
    }
}

/// `count` phantoms; item `i` uses seed `derive_seed(seed, [PHANTOM, i])`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let images = (0..count)
        .into_par_iter()
        .map(|i| generate_phantom(spec, rng::derive_seed(seed, &[stream::PHANTOM, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..count)
        .map(|i| format!("{}-{i:05}", spec.family_name()))
        .collect();
    Ok(Dataset {
        ids,
        images,
        source: DatasetSource::Synthetic { spec: spec.clone(), seed },
    })
}

#[derive(Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm"))
        .unwrap_or(false)
}

/// Loads every PNG/PGM file of `path` (sorted by name), center-cropped to a
/// square and bilinearly rescaled to `d x d`. Intensities are divided by the
/// full range of the stored bit depth.
pub fn ingest_directory(path: impl AsRef<Path>, d: usize) -> Result<Ingested> {
    if d < 2 {
        return Err(DalError::invalid(format!("target size must be >= 2, got {d}")));
    }
    let path = path.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();

    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for file in files {
        match load_image(&file, d) {
            Ok(img) => {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                ids.push(stem.to_string());
                images.push(img);
            }
            Err(e) => {
                let msg = format!("skipping {}: {e}", file.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if images.is_empty() {
        return Err(DalError::Empty("image directory"));
    }
    Ok(Ingested {
        dataset: Dataset {
            ids,
            images,
            source: DatasetSource::Directory { path: path.display().to_string() },
        },
        warnings,
    })
}

/// Reads one grayscale image, center-crops it and rescales it to `d x d`.
pub fn load_image(path: impl AsRef<Path>, d: usize) -> Result<Image> {
    let path = path.as_ref();
    let gray = image::open(path)?.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if w == 0 || h == 0 {
        return Err(DalError::Empty("image"));
    }
    let s = w.min(h);
    let (x0, y0) = ((w - s) / 2, (h - s) / 2);
    let raw = gray.into_raw();
    let mut crop = Vec::with_capacity(s * s);
    for row in y0..y0 + s {
        crop.extend(raw[row * w + x0..row * w + x0 + s].iter().map(|&v| v as f64 / 65535.0));
    }
    let data = if s == d { crop } else { resample_bilinear(&crop, s, s, d, d) };
    Image::new(d, data)
}

/// Writes `img` (values clamped to `[0, 1]`) as a 16-bit grayscale PNG.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let d = img.size() as u32;
    let data: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(d, d, data)
        .ok_or_else(|| DalError::Format("image buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub dataset_hash: String,
}

/// Seeded shuffle, then the first `round(fraction * n)` items (at least one,
/// at most `n - 1`) become the test set. Both lists keep dataset order.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DalError::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(DalError::invalid(format!("cannot split a dataset of {n} item(s)")));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &[stream::SPLIT]));
    let test_idx: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, id) in dataset.ids.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        dataset_hash: dataset.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub hash: String,
    pub size: usize,
    pub source: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<DatasetSplit>,
}

impl Manifest {
    pub fn new(dataset: &Dataset, split: Option<DatasetSplit>) -> Self {
        Manifest {
            ids: dataset.ids.clone(),
            hash: dataset.hash(),
            size: dataset.size(),
            source: dataset.source.clone(),
            split,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Rebuilds the dataset: synthetic sources are regenerated, directories
    /// re-ingested. Fails if the content hash no longer matches.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let dataset = match &self.source {
            DatasetSource::Synthetic { spec, seed } => generate_dataset(spec, self.ids.len(), *seed)?,
            DatasetSource::Directory { path } => ingest_directory(path, self.size)?.dataset,
        };
        let hash = dataset.hash();
        if hash != self.hash {
            return Err(DalError::Format(format!(
                "dataset hash mismatch: manifest {}, data {hash}",
                self.hash
            )));
        }
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn in_unit_range(img: &Image) -> bool {
        img.as_slice().iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn angle_gap(a: f64, b: f64) -> f64 {
        let g = (a - b).rem_euclid(180.0);
        g.min(180.0 - g)
    }

    #[test]
    fn manhattan_without_shapes_is_background() {
        let mut spec = PhantomSpec::manhattan(16);
        if let Family::Manhattan { rectangles, wires, .. } = &mut spec.family {
            *rectangles = 0;
            *wires = 0;
        }
        let img = generate_phantom(&spec, 3).unwrap();
        assert!(img.as_slice().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for spec in [PhantomSpec::manhattan(32), PhantomSpec::fiber(32), PhantomSpec::blob(32)] {
            for seed in 0..10 {
                let a = generate_phantom(&spec, seed).unwrap();
                let b = generate_phantom(&spec, seed).unwrap();
                assert_eq!(a, b);
                assert!(in_unit_range(&a), "{} seed {seed}", spec.family_name());
                assert!(a.max() - a.min() > 0.1, "phantom has structure");
            }
            assert_ne!(generate_phantom(&spec, 0).unwrap(), generate_phantom(&spec, 1).unwrap());
        }
    }

    #[test]
    fn aligned_fibers_follow_the_orientation_parameter() {
        for target in [0.0, 30.0, 90.0, 135.0] {
            let mut spec = PhantomSpec::fiber(32);
            if let Family::Fiber { kappa, orientation_deg, .. } = &mut spec.family {
                *kappa = f64::INFINITY;
                *orientation_deg = target;
            }
            for seed in 0..20 {
                let o = structure_orientation(&generate_phantom(&spec, seed).unwrap());
                assert!(angle_gap(o.degrees, target) < 2.0, "target {target}: {o:?}");
            }
        }
    }

    #[test]
    fn structure_tensor_on_stripes() {
        // horizontal stripes: structures along x
        let img = Image::from_fn(16, |r, _| (r as f64 * 0.7).sin() * 0.5 + 0.5);
        let o = structure_orientation(&img);
        assert!(angle_gap(o.degrees, 0.0) < 1e-9);
        assert!((o.coherence - 1.0).abs() < 1e-12);
        let flat = structure_orientation(&Image::filled(8, 0.3));
        assert_eq!(flat.coherence, 0.0);
    }

    #[test]
    fn coherence_increases_with_kappa() {
        let mean_coherence = |k: f64| {
            let mut spec = PhantomSpec::fiber(32);
            if let Family::Fiber { kappa, .. } = &mut spec.family {
                *kappa = k;
            }
            (0..20)
                .map(|s| structure_orientation(&generate_phantom(&spec, s).unwrap()).coherence)
                .sum::<f64>()
                / 20.0
        };
        let c: Vec<f64> = [1.0, 4.0, 16.0].iter().map(|&k| mean_coherence(k)).collect();
        assert!(c[0] < c[1] && c[1] < c[2], "{c:?}");
    }

    #[test]
    fn von_mises_concentration() {
        let mut r = rng::rng(5);
        let n = 20000;
        // E[cos] = I1(k)/I0(k); for k = 4 that is 0.86352
        let m = (0..n).map(|_| von_mises(&mut r, 4.0).cos()).sum::<f64>() / n as f64;
        assert!((m - 0.86352).abs() < 0.01, "{m}");
        let u = (0..n).map(|_| von_mises(&mut r, 0.0).cos()).sum::<f64>() / n as f64;
        assert!(u.abs() < 0.02);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = PhantomSpec::blob(32);
        if let Family::Blob { background, .. } = &mut spec.family {
            *background = 1.5;
        }
        assert!(generate_phantom(&spec, 0).is_err());
        let mut spec = PhantomSpec::fiber(32);
        if let Family::Fiber { length, .. } = &mut spec.family {
            *length = [0.9, 0.5];
        }
        assert!(spec.validate().is_err());
        assert!(PhantomSpec::by_name("lung", 8).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = PhantomSpec::fiber(32);
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("family = \"fiber\""));
        let back: PhantomSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    fn write_gray8(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        image::ImageBuffer::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn ingest_constant_image_keeps_value() {
        let dir = tempfile::tempdir().unwrap();
        write_gray8(&dir.path().join("a.png"), 256, 256, |_, _| 100);
        let out = ingest_directory(dir.path(), 128).unwrap();
        assert_eq!(out.dataset.len(), 1);
        let img = &out.dataset.images[0];
        assert_eq!(img.size(), 128);
        let want = 100.0 / 255.0;
        assert!(img.as_slice().iter().all(|v| (v - want).abs() < 1e-12));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn ingest_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..100 {
            let p = dir.path().join(format!("img{i:03}.png"));
            if i == 17 || i == 60 {
                std::fs::write(&p, b"not a png").unwrap();
            } else {
                write_gray8(&p, 8, 8, |x, y| ((x + y + i) % 256) as u8);
            }
        }
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let out = ingest_directory(dir.path(), 8).unwrap();
        assert_eq!(out.dataset.len(), 98);
        assert_eq!(out.warnings.len(), 2);
        assert!(out.warnings[0].contains("img017"));
    }

    #[test]
    fn ingest_empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_directory(dir.path(), 8), Err(DalError::Empty(_))));
        std::fs::write(dir.path().join("x.png"), b"junk").unwrap();
        assert!(matches!(ingest_directory(dir.path(), 8), Err(DalError::Empty(_))));
    }

    #[test]
    fn ingest_crops_and_handles_16_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        // 12 x 8: the central 8 x 8 is value 1000, the margins 0
        let buf = image::ImageBuffer::from_fn(12, 8, |x, _| {
            image::Luma([if (2..10).contains(&x) { 1000u16 } else { 0 }])
        });
        buf.save(dir.path().join("wide.pgm")).unwrap();
        let out = ingest_directory(dir.path(), 8).unwrap();
        let want = 1000.0 / 65535.0;
        assert!(out.dataset.images[0].as_slice().iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn ingest_checkerboard_downsample_matches_reference() {
        let dir = tempfile::tempdir().unwrap();
        let w = 16u32;
        // 2x2-pixel checker cells so the 2x downsample is not trivially flat
        let src = |x: u32, y: u32| if ((x / 2) + (y / 2)) % 2 == 0 { 200u8 } else { 40 };
        write_gray8(&dir.path().join("c.png"), w, w, src);
        let got = &ingest_directory(dir.path(), 8).unwrap().dataset.images[0];

        // direct bilinear: output pixel centre (i + 0.5) maps to source
        // coordinate 2 (i + 0.5) - 0.5, clamped to the source extent
        let px = |x: i64, y: i64| src(x.clamp(0, 15) as u32, y.clamp(0, 15) as u32) as f64 / 255.0;
        for r in 0..8 {
            for c in 0..8 {
                let sy = (2.0 * (r as f64 + 0.5) - 0.5).clamp(0.0, 15.0);
                let sx = (2.0 * (c as f64 + 0.5) - 0.5).clamp(0.0, 15.0);
                let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let want = (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1, y0))
                    + fy * ((1.0 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1));
                assert!((got.get(r, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = generate_dataset(&PhantomSpec::blob(8), 10, 1).unwrap();
        let s = split(&ds, 0.2, 9).unwrap();
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train.len(), 8);
        assert_eq!(s, split(&ds, 0.2, 9).unwrap());
        assert_eq!(s.dataset_hash, ds.hash());
        let train: BTreeSet<_> = s.train.iter().collect();
        let test: BTreeSet<_> = s.test.iter().collect();
        assert!(train.is_disjoint(&test));
        let all: BTreeSet<_> = ds.ids.iter().collect();
        assert_eq!(&train | &test, all);
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn manifest_round_trip_regenerates_dataset() {
        let ds = generate_dataset(&PhantomSpec::fiber(16), 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest::new(&ds, Some(split(&ds, 0.25, 0).unwrap()));
        m.save(&path).unwrap();
        let back = Manifest::open(&path).unwrap();
        assert_eq!(back, m);
        let again = back.load_dataset().unwrap();
        assert_eq!(again.images, ds.images);

        let mut bad = m.clone();
        bad.hash = "00".into();
        assert!(matches!(bad.load_dataset(), Err(DalError::Format(_))));
    }

    #[test]
    fn png_round_trip_is_quantized_to_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = generate_phantom(&PhantomSpec::blob(16), 4).unwrap();
        save_png(&img, dir.path().join("p.png")).unwrap();
        let back = &ingest_directory(dir.path(), 16).unwrap().dataset.images[0];
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn outputs_stay_in_unit_range(
            seed in proptest::prelude::any::<u64>(),
            size in 4usize..40,
            family in 0usize..3,
            kappa in 0.0f64..50.0,
        ) {
            let mut spec = [PhantomSpec::manhattan(size), PhantomSpec::fiber(size), PhantomSpec::blob(size)]
                [family]
                .clone();
            if let Family::Fiber { kappa: k, .. } = &mut spec.family {
                *k = kappa;
            }
            let img = generate_phantom(&spec, seed).unwrap();
            proptest::prop_assert!(in_unit_range(&img));
        }
    }
}
