//! Sequential acquisition sessions: configuration, the acquire / measure /
//! resample loop, session archives and replay.

mod report;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use report::{
    aggregate, measurements_to_target, plot_svg, Count, Curve, CurvePoint, Report, TargetCount,
};

use crate::acquisition::{next_design, AcquisitionConfig, ScoreTable, Selection, Strategy};
use crate::archive::Archive;
use crate::baselines::{
    DiffusionSampler, EnsembleConfig, EnsembleSampler, PosteriorSampler, SwagConfig, SwagSampler,
};
use crate::diffusion::{
    load_checkpoint, Denoiser, DiffusionModel, GaussianDenoiser, GaussianFieldDenoiser, NoiseSchedule,
    ScheduleParams,
};
use crate::error::{DalError, Result};
use crate::geometry::{AngleGrid, DesignSpace, Projector};
use crate::image::Image;
use crate::measurement::{measure, prescan_measure, MeasurementSet, NoiseModel};
use crate::metrics::{compute_metrics, Metrics};
use crate::phantoms::{generate_phantom, load_image, save_png, Manifest, PhantomSpec};
use crate::posterior::{ConsistencyMode, SampleBatch, SamplerConfig};
use crate::rng::{derive_seed, stream};

const SESSION_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    /// A trained network checkpoint.
    Checkpoint { path: PathBuf },
    /// Closed-form i.i.d. Gaussian prior (no training needed).
    Gaussian {
        mu: f64,
        tau: f64,
        #[serde(default)]
        schedule: ScheduleParams,
    },
    /// Closed-form stationary Gaussian field prior with correlation `length`.
    GaussianField {
        mu: f64,
        tau: f64,
        length: f64,
        #[serde(default)]
        schedule: ScheduleParams,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Diffusion {
        prior: PriorConfig,
        #[serde(default)]
        sampler: SamplerConfig,
    },
    Ensemble(EnsembleConfig),
    Swag(SwagConfig),
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Diffusion { .. } => "diffusion",
            BackendConfig::Ensemble(_) => "ensemble",
            BackendConfig::Swag(_) => "swag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrescanConfig {
    pub factor: usize,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// How the measurement set is seeded before the first acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialSet {
    /// Step 1 measures the reference design: the 0 degree projection, or the
    /// DC row of k-space.
    #[default]
    Reference,
    /// Every step is chosen by the strategy (conditioning on the pre-scan, if
    /// any, or on nothing).
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataRef {
    Phantom { spec: PhantomSpec, seed: u64 },
    Manifest { path: PathBuf, id: String },
    File { path: PathBuf, size: usize },
}

fn default_label() -> String {
    "session".into()
}
fn default_space() -> DesignSpace {
    DesignSpace::Angles(AngleGrid::full_degree())
}
fn default_budget() -> usize {
    100
}
fn default_k() -> usize {
    10
}
fn default_strategy() -> Strategy {
    Strategy::Variance
}
fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method name used to group sessions in reports.
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default = "default_space")]
    pub space: DesignSpace,
    /// Number of acquisition steps `n`.
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Posterior samples per step.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub pool: Option<Vec<usize>>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub prescan: Option<PrescanConfig>,
    #[serde(default)]
    pub initial: InitialSet,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataRef>,
    /// Metrics are recorded at every multiple of this step and at the last step.
    #[serde(default = "one")]
    pub metric_every: usize,
    /// Batch-mean PNG cadence (needs an output directory).
    #[serde(default)]
    pub dump_every: Option<usize>,
    /// Also score `reconstruct()` (the iterative solve for baselines).
    #[serde(default)]
    pub reconstruction_metrics: bool,
}

impl ExperimentConfig {
    pub fn new(label: impl Into<String>, backend: BackendConfig) -> Self {
        ExperimentConfig {
            label: label.into(),
            space: default_space(),
            budget: default_budget(),
            k: default_k(),
            strategy: default_strategy(),
            pool: None,
            backend,
            noise: NoiseModel::None,
            prescan: None,
            initial: InitialSet::Reference,
            seed: 0,
            data: None,
            metric_every: 1,
            dump_every: None,
            reconstruction_metrics: false,
        }
    }

    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            strategy: self.strategy,
            pool: self.pool.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DalError::invalid("k must be >= 1"));
        }
        if self.budget > self.space.len() {
            return Err(DalError::invalid(format!(
                "budget {} exceeds the design space of {} designs",
                self.budget,
                self.space.len()
            )));
        }
        if self.metric_every == 0 {
            return Err(DalError::invalid("metric_every must be >= 1"));
        }
        if self.dump_every == Some(0) {
            return Err(DalError::invalid("dump_every must be >= 1"));
        }
        if self.label.is_empty() {
            return Err(DalError::invalid("label must not be empty"));
        }
        if let DesignSpace::Angles(g) = &self.space {
            g.validate()?;
        }
        self.acquisition().validate(&self.space)?;
        self.noise.validate()?;
        if let Some(p) = &self.prescan {
            p.noise.validate()?;
            if p.factor < 2 {
                return Err(DalError::invalid("pre-scan factor must be >= 2"));
            }
        }
        if let BackendConfig::Diffusion { sampler, .. } = &self.backend {
            sampler.consistency.validate()?;
            if sampler.num_steps == 0 {
                return Err(DalError::invalid("sampler needs at least one step"));
            }
            if sampler.consistency.mode == ConsistencyMode::FourierInpaint
                && !matches!(self.space, DesignSpace::KspaceRows { .. })
            {
                return Err(DalError::invalid("fourier inpainting needs the k-space design space"));
            }
        }
        Ok(())
    }

    /// Loads a TOML (`.toml`) or JSON config. Relative paths inside are
    /// resolved against the file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = parse_config(path)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Diffusion {
            prior: PriorConfig::Checkpoint { path },
            ..
        } = &mut self.backend
        {
            fix(path);
        }
        match &mut self.data {
            Some(DataRef::Manifest { path, .. }) | Some(DataRef::File { path, .. }) => fix(path),
            _ => {}
        }
    }
}

/// Deserializes a TOML (`.toml`) or JSON file.
pub fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let is_toml = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("toml"))
        .unwrap_or(false);
    if is_toml {
        Ok(toml::from_str(&text)?)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads each checkpoint once and shares it between sessions.
#[derive(Default)]
pub struct ModelStore {
    models: Mutex<HashMap<PathBuf, Arc<DiffusionModel>>>,
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, path: impl Into<PathBuf>, model: DiffusionModel) {
        self.models
            .lock()
            .expect("model store poisoned")
            .insert(path.into(), Arc::new(model));
    }

    pub fn get(&self, path: &Path) -> Result<Arc<DiffusionModel>> {
        if let Some(m) = self.models.lock().expect("model store poisoned").get(path) {
            return Ok(m.clone());
        }
        let model = Arc::new(load_checkpoint(path)?);
        self.models
            .lock()
            .expect("model store poisoned")
            .insert(path.to_path_buf(), model.clone());
        Ok(model)
    }
}

enum Prior {
    Model(Arc<DiffusionModel>),
    Gaussian(GaussianDenoiser),
    Field(GaussianFieldDenoiser),
}

impl Prior {
    fn build(cfg: &PriorConfig, models: &ModelStore, d: usize) -> Result<Self> {
        Ok(match cfg {
            PriorConfig::Checkpoint { path } => {
                let m = models.get(path)?;
                if m.image_size != d {
                    return Err(DalError::DimensionMismatch {
                        expected: m.image_size,
                        got: d,
                    });
                }
                Prior::Model(m)
            }
            PriorConfig::Gaussian { mu, tau, schedule } => Prior::Gaussian(GaussianDenoiser {
                mu: *mu,
                tau: *tau,
                schedule: NoiseSchedule::new(schedule.clone())?,
            }),
            PriorConfig::GaussianField {
                mu,
                tau,
                length,
                schedule,
            } => Prior::Field(GaussianFieldDenoiser::new(
                *mu,
                *tau,
                *length,
                d,
                NoiseSchedule::new(schedule.clone())?,
            )),
        })
    }

    fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Prior::Model(m) => m.as_ref(),
            Prior::Gaussian(g) => g,
            Prior::Field(f) => f,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        match self {
            Prior::Model(m) => &m.schedule,
            Prior::Gaussian(g) => &g.schedule,
            Prior::Field(f) => &f.schedule,
        }
    }
}

enum Backend {
    Diffusion { prior: Prior, sampler: SamplerConfig },
    Ensemble(EnsembleConfig),
    Swag(SwagConfig),
}

impl Backend {
    fn build(cfg: &BackendConfig, models: &ModelStore, d: usize) -> Result<Self> {
        Ok(match cfg {
            BackendConfig::Diffusion { prior, sampler } => Backend::Diffusion {
                prior: Prior::build(prior, models, d)?,
                sampler: sampler.clone(),
            },
            BackendConfig::Ensemble(c) => Backend::Ensemble(c.clone()),
            BackendConfig::Swag(c) => Backend::Swag(c.clone()),
        })
    }

    fn model_hash(&self) -> Option<String> {
        match self {
            Backend::Diffusion { prior, .. } => Some(prior.denoiser().id()),
            _ => None,
        }
    }

    fn sampler<'a>(&'a self, projector: &'a Projector, k: usize) -> Box<dyn PosteriorSampler + 'a> {
        match self {
            Backend::Diffusion { prior, sampler } => Box::new(DiffusionSampler {
                denoiser: prior.denoiser(),
                schedule: prior.schedule(),
                projector,
                config: sampler.clone(),
                reconstruct_k: k,
            }),
            Backend::Ensemble(c) => Box::new(EnsembleSampler {
                projector,
                config: c.clone(),
            }),
            Backend::Swag(c) => Box::new(SwagSampler {
                projector,
                config: c.clone(),
            }),
        }
    }
}

/// Point estimate of a `d x d` image from `set` with the given back-end: the
/// mean of `k` posterior samples for diffusion, the back-end's iterative
/// solve for the baselines.
pub fn reconstruct_set(
    backend: &BackendConfig,
    set: &MeasurementSet,
    d: usize,
    k: usize,
    models: &ModelStore,
) -> Result<Image> {
    let backend = Backend::build(backend, models, d)?;
    let projector = Projector::new(set.space, d)?;
    let sampler = backend.sampler(&projector, k.max(1));
    let image = sampler.reconstruct(set)?;
    Ok(image)
}

/// Resolves `cfg.data` to `(id, image)`.
pub fn resolve_data(data: &DataRef) -> Result<(String, Image)> {
    match data {
        DataRef::Phantom { spec, seed } => Ok((
            format!("{}-seed{seed}", spec.family_name()),
            generate_phantom(spec, *seed)?,
        )),
        DataRef::Manifest { path, id } => {
            let ds = Manifest::open(path)?.load_dataset()?;
            let img = ds
                .get(id)
                .cloned()
                .ok_or_else(|| DalError::invalid(format!("unknown dataset id '{id}'")))?;
            Ok((id.clone(), img))
        }
        DataRef::File { path, size } => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            Ok((id, load_image(path, *size)?))
        }
    }
}

/// The design measured first under [`InitialSet::Reference`].
pub fn reference_design(space: &DesignSpace) -> usize {
    match space {
        DesignSpace::Angles(_) => 0,
        DesignSpace::KspaceRows { size } => size / 2,
    }
}

/// Seed of the sample batch drawn after step `t` (step 0: before any
/// acquisition).
pub fn step_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[stream::STEP, t as u64])
}

pub fn measurement_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[stream::MEASURE, t as u64])
}

fn rng_digest(seed: u64, t: usize) -> String {
    let mut h = Sha256::new();
    h.update(measurement_seed(seed, t).to_le_bytes());
    h.update(step_seed(seed, t).to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub design: usize,
    /// `"initial"` for the reference design, otherwise the strategy name.
    pub chosen_by: String,
    #[serde(default)]
    pub scores: Option<ScoreTable>,
    /// Metrics of the batch mean after this step's measurement.
    #[serde(default)]
    pub metrics: Option<Metrics>,
    #[serde(default)]
    pub recon_metrics: Option<Metrics>,
    pub rng_digest: String,
    pub set_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub config: ExperimentConfig,
    pub model_hash: Option<String>,
    pub data_id: String,
    pub truth: Image,
    /// Metrics before the first acquisition (step 0).
    pub initial_metrics: Option<Metrics>,
    pub initial_recon_metrics: Option<Metrics>,
    pub records: Vec<StepRecord>,
    pub set: MeasurementSet,
    /// Batch mean after the last recorded step.
    pub final_mean: Option<Image>,
    pub abort: Option<Abort>,
    /// Seconds per step; kept out of the archive so reruns stay
    /// byte-identical, and written to a sidecar by [`SessionLog::save`].
    pub wall_times: Vec<f64>,
}

impl SessionLog {
    pub fn is_complete(&self) -> bool {
        self.abort.is_none() && self.records.len() == self.config.budget
    }

    /// `(step, metrics)` pairs, step 0 first.
    pub fn metric_series(&self) -> Vec<(usize, Metrics)> {
        self.initial_metrics
            .map(|m| (0, m))
            .into_iter()
            .chain(self.records.iter().filter_map(|r| r.metrics.map(|m| (r.step, m))))
            .collect()
    }

    pub fn recon_series(&self) -> Vec<(usize, Metrics)> {
        self.initial_recon_metrics
            .map(|m| (0, m))
            .into_iter()
            .chain(self.records.iter().filter_map(|r| r.recon_metrics.map(|m| (r.step, m))))
            .collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut archive = Archive::new(serde_json::Value::Null);
        archive.put("truth", self.truth.as_slice().to_vec());
        let set = self.set.store(&mut archive, "set");
        if let Some(m) = &self.final_mean {
            archive.put("final_mean", m.as_slice().to_vec());
        }
        archive.meta = json!({
            "kind": "session",
            "version": SESSION_VERSION,
            "config": serde_json::to_value(&self.config)?,
            "model_hash": self.model_hash,
            "data_id": self.data_id,
            "image_size": self.truth.size(),
            "initial_metrics": self.initial_metrics,
            "initial_recon_metrics": self.initial_recon_metrics,
            "records": serde_json::to_value(&self.records)?,
            "set": set,
            "has_final_mean": self.final_mean.is_some(),
            "abort": self.abort,
        });
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.meta;
        if meta["kind"] != "session" {
            return Err(DalError::Format("archive does not hold a session".into()));
        }
        if meta["version"].as_u64() != Some(SESSION_VERSION) {
            return Err(DalError::Format(format!(
                "unsupported session version {}",
                meta["version"]
            )));
        }
        let size = meta["image_size"]
            .as_u64()
            .ok_or_else(|| DalError::Format("session: bad `image_size`".into()))? as usize;
        let final_mean = if meta["has_final_mean"].as_bool().unwrap_or(false) {
            Some(Image::new(size, archive.get("final_mean")?.to_vec())?)
        } else {
            None
        };
        Ok(SessionLog {
            config: field(meta, "config")?,
            model_hash: field(meta, "model_hash")?,
            data_id: field(meta, "data_id")?,
            truth: Image::new(size, archive.get("truth")?.to_vec())?,
            initial_metrics: field(meta, "initial_metrics")?,
            initial_recon_metrics: field(meta, "initial_recon_metrics")?,
            records: field(meta, "records")?,
            set: MeasurementSet::load(&meta["set"], archive)?,
            final_mean,
            abort: field(meta, "abort")?,
            wall_times: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.to_bytes()
    }

    /// Writes the archive and a `<path>.timing.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_archive()?.write(path)?;
        let sidecar = timing_path(path);
        std::fs::write(sidecar, serde_json::to_string(&json!({ "wall_times": self.wall_times }))?)?;
        Ok(())
    }

    /// Reads an archive; the timing sidecar is picked up when present.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut log = Self::from_archive(&Archive::read(path)?)?;
        if let Ok(text) = std::fs::read_to_string(timing_path(path)) {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            log.wall_times = serde_json::from_value(v["wall_times"].clone())?;
        }
        Ok(log)
    }
}

fn field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    Ok(serde_json::from_value(meta[key].clone())?)
}

pub fn timing_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where batch-mean PNGs go when `dump_every` is set.
    pub dump_dir: Option<PathBuf>,
}

/// Runs one session on the image named by `cfg.data`.
pub fn run_dal(cfg: &ExperimentConfig, models: &ModelStore, opts: &RunOptions) -> Result<SessionLog> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| DalError::invalid("config has no `data` reference"))?;
    let (id, truth) = resolve_data(data)?;
    run_session(cfg, &truth, &id, models, opts)
}

/// The acquisition loop on a given ground truth. Configuration problems are
/// returned as errors; a failure inside the loop ends the session early with
/// [`SessionLog::abort`] recording the step.
pub fn run_session(
    cfg: &ExperimentConfig,
    truth: &Image,
    data_id: &str,
    models: &ModelStore,
    opts: &RunOptions,
) -> Result<SessionLog> {
    cfg.validate()?;
    let d = truth.size();
    if let DesignSpace::KspaceRows { size } = cfg.space {
        if size != d {
            return Err(DalError::DimensionMismatch { expected: size, got: d });
        }
    }
    let projector = Projector::new(cfg.space, d)?;
    let backend = Backend::build(&cfg.backend, models, d)?;
    let sampler = backend.sampler(&projector, cfg.k);

    let mut set = MeasurementSet::new(cfg.space);
    if let Some(p) = &cfg.prescan {
        if d % p.factor != 0 {
            return Err(DalError::invalid(format!(
                "pre-scan factor {} does not divide image size {d}",
                p.factor
            )));
        }
        let seed = derive_seed(cfg.seed, &[stream::PRESCAN]);
        set = set.with_prescan(prescan_measure(truth, p.factor, p.noise, seed)?);
    }

    let acq = cfg.acquisition();
    let n = cfg.budget;
    let adaptive = cfg.strategy.is_adaptive();
    let due = |t: usize| t % cfg.metric_every == 0 || t == n;
    let score = |batch: &SampleBatch, set: &MeasurementSet| -> Result<(Metrics, Option<Metrics>)> {
        let m = compute_metrics(&batch.mean, truth)?;
        let r = if cfg.reconstruction_metrics {
            Some(compute_metrics(&sampler.reconstruct(set)?, truth)?)
        } else {
            None
        };
        Ok((m, r))
    };
    let dump = |t: usize, batch: &SampleBatch| -> Result<()> {
        if let (Some(every), Some(dir)) = (cfg.dump_every, &opts.dump_dir) {
            if t % every == 0 || t == n {
                std::fs::create_dir_all(dir)?;
                save_png(&batch.mean, dir.join(format!("{}_step{t:04}.png", cfg.label)))?;
            }
        }
        Ok(())
    };

    let mut log = SessionLog {
        config: cfg.clone(),
        model_hash: backend.model_hash(),
        data_id: data_id.to_string(),
        truth: truth.clone(),
        initial_metrics: None,
        initial_recon_metrics: None,
        records: Vec::with_capacity(n),
        set: set.clone(),
        final_mean: None,
        abort: None,
        wall_times: Vec::with_capacity(n),
    };

    let abort = |log: &mut SessionLog, step: usize, e: DalError| {
        log::warn!("session '{}' aborted at step {step}: {e}", cfg.label);
        log.abort = Some(Abort {
            step,
            kind: e.kind().to_string(),
            message: e.to_string(),
        });
    };

    let mut batch = match sampler.sample(&set, cfg.k, step_seed(cfg.seed, 0)) {
        Ok(b) => b,
        Err(e) => {
            abort(&mut log, 0, e);
            return Ok(log);
        }
    };
    match score(&batch, &set).and_then(|s| dump(0, &batch).map(|_| s)) {
        Ok((m, r)) => {
            log.initial_metrics = Some(m);
            log.initial_recon_metrics = r;
        }
        Err(e) => {
            abort(&mut log, 0, e);
            return Ok(log);
        }
    }
    let mut last_mean = Some(batch.mean.clone());

    for t in 1..=n {
        let start = Instant::now();
        let outcome = (|| -> Result<(StepRecord, Option<SampleBatch>)> {
            let sel = if t == 1 && cfg.initial == InitialSet::Reference {
                Selection {
                    design: reference_design(&cfg.space),
                    table: None,
                }
            } else {
                next_design(&acq, Some(&batch), &projector, &set.measured_mask())?
            };
            let chosen_by = if sel.table.is_none() && t == 1 && cfg.initial == InitialSet::Reference {
                "initial".to_string()
            } else {
                cfg.strategy.name().to_string()
            };
            let y = measure(truth, sel.design, &projector, cfg.noise, measurement_seed(cfg.seed, t))?;
            set.add(y)?;
            let need = (adaptive && t < n) || due(t);
            let next = if need {
                Some(sampler.sample(&set, cfg.k, step_seed(cfg.seed, t))?)
            } else {
                None
            };
            let (metrics, recon_metrics) = match (&next, due(t)) {
                (Some(b), true) => {
                    let (m, r) = score(b, &set)?;
                    dump(t, b)?;
                    (Some(m), r)
                }
                _ => (None, None),
            };
            Ok((
                StepRecord {
                    step: t,
                    design: sel.design,
                    chosen_by,
                    scores: sel.table,
                    metrics,
                    recon_metrics,
                    rng_digest: rng_digest(cfg.seed, t),
                    set_hash: set.hash(),
                },
                next,
            ))
        })();
        match outcome {
            Ok((record, next)) => {
                log.records.push(record);
                log.wall_times.push(start.elapsed().as_secs_f64());
                if let Some(b) = next {
                    last_mean = Some(b.mean.clone());
                    batch = b;
                }
            }
            Err(e) => {
                abort(&mut log, t, e);
                break;
            }
        }
    }
    log.set = set;
    log.final_mean = last_mean;
    Ok(log)
}

/// Re-runs the reconstruction path on the logged measurements and returns
/// the recomputed `(step, metrics)` pairs for every step that has metrics.
pub fn replay(log: &SessionLog, models: &ModelStore) -> Result<Vec<(usize, Metrics)>> {
    let cfg = &log.config;
    let d = log.truth.size();
    let projector = Projector::new(cfg.space, d)?;
    let backend = Backend::build(&cfg.backend, models, d)?;
    if backend.model_hash() != log.model_hash {
        return Err(DalError::invalid(format!(
            "model {:?} differs from the session's {:?}",
            backend.model_hash(),
            log.model_hash
        )));
    }
    let sampler = backend.sampler(&projector, cfg.k);
    log.metric_series()
        .into_par_iter()
        .map(|(t, _)| {
            let set = log.set.prefix(t);
            let batch = sampler.sample(&set, cfg.k, step_seed(cfg.seed, t))?;
            Ok((t, compute_metrics(&batch.mean, &log.truth)?))
        })
        .collect()
}

/// Largest absolute difference between logged and replayed metrics.
pub fn replay_deviation(log: &SessionLog, models: &ModelStore) -> Result<f64> {
    let logged = log.metric_series();
    let again = replay(log, models)?;
    let mut worst = 0.0f64;
    for ((t0, a), (t1, b)) in logged.iter().zip(&again) {
        debug_assert_eq!(t0, t1);
        worst = worst
            .max((a.psnr - b.psnr).abs())
            .max((a.rmse - b.rmse).abs())
            .max((a.ssim - b.ssim).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct TestItem {
    pub id: String,
    pub truth: Image,
}

/// A benchmark description file: methods plus the test images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<ExperimentConfig>,
    pub test: TestSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TestSet {
    /// `count` phantoms generated from `seed`; pick a seed the training set
    /// did not use.
    Phantoms { spec: PhantomSpec, count: usize, seed: u64 },
    /// The test split of a dataset manifest.
    Manifest { path: PathBuf },
}

impl BenchConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: BenchConfig = parse_config(path)?;
        if let Some(dir) = path.parent() {
            for m in &mut cfg.methods {
                m.resolve_paths(dir);
            }
            if let TestSet::Manifest { path } = &mut cfg.test {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        }
        Ok(cfg)
    }
}

impl TestSet {
    pub fn items(&self) -> Result<Vec<TestItem>> {
        match self {
            TestSet::Phantoms { spec, count, seed } => crate::phantoms::generate_dataset(spec, *count, *seed)
                .map(|ds| {
                    ds.ids
                        .into_iter()
                        .zip(ds.images)
                        .map(|(id, truth)| TestItem { id, truth })
                        .collect()
                }),
            TestSet::Manifest { path } => {
                let manifest = Manifest::open(path)?;
                let split = manifest
                    .split
                    .clone()
                    .ok_or_else(|| DalError::invalid("manifest has no train/test split"))?;
                let ds = manifest.load_dataset()?;
                Ok(split
                    .test
                    .iter()
                    .zip(ds.select(&split.test)?)
                    .map(|(id, truth)| TestItem { id: id.clone(), truth })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    /// Sessions in method-major order: `sessions[m * items + j]`.
    pub sessions: Vec<SessionLog>,
    pub report: Report,
}

/// Runs every method on every test item. Item `j` of a method runs with
/// seed `derive_seed(cfg.seed, [BENCH, j])`, so methods that share a seed
/// see identical measurement noise on the same item.
pub fn run_benchmark(
    matrix: &[ExperimentConfig],
    items: &[TestItem],
    models: &ModelStore,
    opts: &RunOptions,
) -> Result<Benchmark> {
    if matrix.is_empty() {
        return Err(DalError::Empty("benchmark matrix"));
    }
    if items.len() < 2 {
        return Err(DalError::invalid(format!(
            "a benchmark needs at least 2 test items, got {}",
            items.len()
        )));
    }
    let mut labels = std::collections::BTreeSet::new();
    for cfg in matrix {
        cfg.validate()?;
        if !labels.insert(cfg.label.as_str()) {
            return Err(DalError::invalid(format!("duplicate method label '{}'", cfg.label)));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..matrix.len())
        .flat_map(|m| (0..items.len()).map(move |j| (m, j)))
        .collect();
    let sessions = pairs
        .par_iter()
        .map(|&(m, j)| {
            let mut cfg = matrix[m].clone();
            cfg.seed = derive_seed(cfg.seed, &[stream::BENCH, j as u64]);
            let log = run_session(&cfg, &items[j].truth, &items[j].id, models, opts)?;
            match &log.abort {
                Some(a) => Err(DalError::invalid(format!(
                    "method '{}' on '{}' aborted at step {}: {}",
                    cfg.label, items[j].id, a.step, a.message
                ))),
                None => Ok(log),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&sessions)?;
    Ok(Benchmark { sessions, report })
}
