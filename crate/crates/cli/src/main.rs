//! `dal`: command-line front end for diffusion active learning experiments.
//!
//! Every failure is reported as one JSON line on stderr,
//! `{"error":"<kind>","message":"..."}`, with exit code 2 for usage errors
//! and 1 for everything else. Relative output paths are resolved against
//! `$DAL_OUTPUT_DIR` when it is set.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dal::archive::Archive;
use dal::baselines::{EnsembleConfig, SwagConfig};
use dal::classic::{fbp, iterative_reconstruct, IterativeConfig};
use dal::diffusion::{save_checkpoint, write_loss_csv, DiffusionModel, ScheduleParams, TrainConfig};
use dal::harness::{
    aggregate, measurements_to_target, parse_config, plot_svg, reconstruct_set, run_benchmark, run_dal,
    BackendConfig, BenchConfig, ExperimentConfig, ModelStore, PriorConfig, RunOptions, SessionLog,
};
use dal::image::Image;
use dal::measurement::MeasurementSet;
use dal::metrics::compute_metrics;
use dal::nn::ArchConfig;
use dal::phantoms::{generate_dataset, load_image, save_png, split, Manifest, PhantomSpec};
use dal::posterior::SamplerConfig;
use dal::DalError;

const OUTPUT_DIR_VAR: &str = "DAL_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "dal", version, about = "Diffusion active learning for sparse-view tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset (PNGs plus manifest.json).
    Phantom(PhantomArgs),
    /// Train a diffusion prior on a dataset.
    Train(TrainArgs),
    /// Run one active learning session.
    RunAl(RunAlArgs),
    /// Run a methods x test-items benchmark.
    Bench(BenchArgs),
    /// Reconstruct an image from a saved measurement set or session.
    Reconstruct(ReconstructArgs),
    /// Aggregate session files into curves and measurement counts.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct PhantomArgs {
    /// Family name: manhattan, fiber or blob.
    #[arg(long, conflicts_with = "spec")]
    family: Option<String>,
    /// Phantom spec file (TOML or JSON), overriding --family.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hold out this fraction of the items as a test split.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Architecture, schedule and optimiser settings (`[arch]`, `[schedule]`,
    /// `[train]` tables); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on the training split (or all items) of this manifest.
    #[arg(long, conflicts_with = "family")]
    manifest: Option<PathBuf>,
    /// Train on freshly generated phantoms of this family.
    #[arg(long)]
    family: Option<String>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Overrides the training seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct RunAlArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the session seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Session file; defaults to `<label>-seed<seed>.session`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Offset added to every method's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "bench")]
    out_dir: PathBuf,
    /// Also write every session file.
    #[arg(long)]
    save_sessions: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Fbp,
    Iterative,
    Diffusion,
    Ensemble,
    Swag,
}

#[derive(clap::Args, Debug)]
struct ReconstructArgs {
    /// A measurement-set archive or a session file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "fbp")]
    method: Method,
    /// Settings for the chosen method: IterativeConfig, SamplerConfig,
    /// EnsembleConfig or SwagConfig (TOML or JSON).
    #[arg(long)]
    method_config: Option<PathBuf>,
    /// Diffusion checkpoint (required for --method diffusion).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image size; taken from the session or the k-space design when omitted.
    #[arg(long)]
    size: Option<usize>,
    /// Posterior samples averaged by the diffusion method.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Ground-truth image for metrics; sessions carry their own.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Session files.
    #[arg(required = true)]
    sessions: Vec<PathBuf>,
    /// Print the measurement count at which each method's mean PSNR reaches
    /// this value.
    #[arg(long)]
    target_psnr: Option<f64>,
    /// Write report.csv and per-metric SVG plots here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(DalError),
}

impl From<DalError> for CliError {
    fn from(e: DalError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "|")
        .collect::<Vec<_>>()
        .join(" ")
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(first_line(&e.to_string()))),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn first_line(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").trim().to_string()
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({"error": e.kind(), "message": e.message()}));
    ExitCode::from(e.exit_code())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::RunAl(a) => run_al(a),
        Command::Bench(a) => bench(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Report(a) => report(a),
    }
}

/// Resolves a relative output path against `$DAL_OUTPUT_DIR` and creates its
/// parent directory.
fn output_path(path: &Path) -> CliResult<PathBuf> {
    let path = match std::env::var_os(OUTPUT_DIR_VAR) {
        Some(dir) if path.is_relative() && !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn output_dir(path: &Path) -> CliResult<PathBuf> {
    let dir = output_path(&path.join("x"))?;
    let dir = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(dir)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn spec_from(family: Option<&str>, spec: Option<&Path>, size: usize) -> CliResult<PhantomSpec> {
    let spec = match (spec, family) {
        (Some(path), _) => parse_config::<PhantomSpec>(path)?,
        (None, Some(name)) => PhantomSpec::by_name(name, size)?,
        (None, None) => return Err(CliError::Usage("one of --family or --spec is required".into())),
    };
    spec.validate()?;
    Ok(spec)
}

fn phantom(a: PhantomArgs) -> CliResult {
    let spec = spec_from(a.family.as_deref(), a.spec.as_deref(), a.size)?;
    let dataset = generate_dataset(&spec, a.count, a.seed)?;
    let split = a
        .test_fraction
        .map(|f| split(&dataset, f, a.seed))
        .transpose()?;
    let dir = output_dir(&a.out)?;
    for (id, img) in dataset.ids.iter().zip(&dataset.images) {
        save_png(img, dir.join(format!("{id}.png")))?;
    }
    let manifest_path = dir.join("manifest.json");
    Manifest::new(&dataset, split).save(&manifest_path)?;
    emit(json!({
        "manifest": manifest_path,
        "count": dataset.len(),
        "hash": dataset.hash(),
    }));
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    arch: ArchConfig,
    schedule: ScheduleParams,
    train: TrainConfig,
}

fn train(a: TrainArgs) -> CliResult {
    let mut file = match &a.config {
        Some(path) => parse_config::<TrainFile>(path)?,
        None => TrainFile::default(),
    };
    if let Some(seed) = a.seed {
        file.train.seed = seed;
    }
    let (images, hash) = match (&a.manifest, &a.family) {
        (Some(path), _) => {
            let manifest = Manifest::open(path)?;
            let dataset = manifest.load_dataset()?;
            let images = match &manifest.split {
                Some(s) => dataset.select(&s.train)?,
                None => dataset.images.clone(),
            };
            (images, dataset.hash())
        }
        (None, Some(name)) => {
            let spec = PhantomSpec::by_name(name, a.size)?;
            let dataset = generate_dataset(&spec, a.count, a.data_seed)?;
            let hash = dataset.hash();
            (dataset.images, hash)
        }
        (None, None) => return Err(CliError::Usage("one of --manifest or --family is required".into())),
    };
    log::info!("training on {} images", images.len());
    let (model, losses) = DiffusionModel::train_new(&file.arch, file.schedule, &images, &file.train, hash)?;
    let out = output_path(&a.out)?;
    save_checkpoint(&out, &model)?;
    let mut loss_path = out.clone().into_os_string();
    loss_path.push(".loss.csv");
    write_loss_csv(&loss_path, &losses)?;
    emit(json!({
        "checkpoint": out,
        "model_id": model.meta.model_id,
        "final_loss": losses.last().map(|l| l.loss),
    }));
    Ok(())
}

fn run_al(a: RunAlArgs) -> CliResult {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = output_path(
        &a.out
            .unwrap_or_else(|| PathBuf::from(format!("{}-seed{}.session", cfg.label, cfg.seed))),
    )?;
    let opts = RunOptions {
        dump_dir: cfg
            .dump_every
            .map(|_| out.with_extension("frames")),
    };
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let log = run_dal(&cfg, &ModelStore::new(), &opts)?;
    log.save(&out)?;
    let last = log.metric_series().last().copied();
    emit(json!({
        "session": out,
        "steps": log.records.len(),
        "complete": log.is_complete(),
        "final_psnr": last.map(|(_, m)| m.psnr),
        "abort": log.abort,
    }));
    match &log.abort {
        Some(abort) => Err(CliError::Core(DalError::invalid(format!(
            "session aborted at step {}: {}",
            abort.step, abort.message
        )))),
        None => Ok(()),
    }
}

fn bench(a: BenchArgs) -> CliResult {
    let mut cfg = BenchConfig::from_path(&a.config)?;
    if let Some(offset) = a.seed {
        for m in &mut cfg.methods {
            m.seed = m.seed.wrapping_add(offset);
        }
    }
    let items = cfg.test.items()?;
    let dir = output_dir(&a.out_dir)?;
    let result = run_benchmark(&cfg.methods, &items, &ModelStore::new(), &RunOptions::default())?;
    let csv_path = dir.join("report.csv");
    result.report.write_csv(&csv_path)?;
    for metric in ["psnr", "ssim"] {
        std::fs::write(dir.join(format!("{metric}.svg")), plot_svg(&result.report, metric)?)?;
    }
    if a.save_sessions {
        let sessions = dir.join("sessions");
        std::fs::create_dir_all(&sessions)?;
        for (i, log) in result.sessions.iter().enumerate() {
            let item = &items[i % items.len()].id;
            log.save(sessions.join(format!("{}-{item}.session", log.config.label)))?;
        }
    }
    emit(json!({
        "report": csv_path,
        "methods": cfg.methods.len(),
        "items": items.len(),
    }));
    Ok(())
}

/// The measurement set plus, for sessions, the image size and ground truth.
fn load_measurements(path: &Path) -> CliResult<(MeasurementSet, Option<Image>)> {
    let archive = Archive::read(path)?;
    if archive.meta["kind"] == "session" {
        let log = SessionLog::from_archive(&archive)?;
        return Ok((log.set, Some(log.truth)));
    }
    Ok((MeasurementSet::open(path)?, None))
}

fn method_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    Ok(match path {
        Some(p) => parse_config(p)?,
        None => T::default(),
    })
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    let (set, session_truth) = load_measurements(&a.input)?;
    let truth = match &a.truth {
        Some(p) => {
            let d = a
                .size
                .or(session_truth.as_ref().map(Image::size))
                .ok_or_else(|| CliError::Usage("--size is required with --truth".into()))?;
            Some(load_image(p, d)?)
        }
        None => session_truth,
    };
    let d = match (a.size, &truth, set.space) {
        (Some(d), _, _) => d,
        (None, Some(t), _) => t.size(),
        (None, None, dal::geometry::DesignSpace::KspaceRows { size }) => size,
        _ => return Err(CliError::Usage("--size is required for this input".into())),
    };
    let method_cfg = a.method_config.as_deref();
    let models = ModelStore::new();
    let image = match a.method {
        Method::Fbp => fbp(&set, d)?,
        Method::Iterative => iterative_reconstruct(&set, d, &method_config::<IterativeConfig>(method_cfg)?)?,
        Method::Diffusion => {
            let path = a
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("--checkpoint is required for --method diffusion".into()))?;
            let backend = BackendConfig::Diffusion {
                prior: PriorConfig::Checkpoint { path },
                sampler: method_config::<SamplerConfig>(method_cfg)?,
            };
            reconstruct_set(&backend, &set, d, a.k, &models)?
        }
        Method::Ensemble => {
            let backend = BackendConfig::Ensemble(method_config::<EnsembleConfig>(method_cfg)?);
            reconstruct_set(&backend, &set, d, a.k, &models)?
        }
        Method::Swag => {
            let backend = BackendConfig::Swag(method_config::<SwagConfig>(method_cfg)?);
            reconstruct_set(&backend, &set, d, a.k, &models)?
        }
    };
    let out = output_path(&a.out)?;
    save_png(&image.map(|v| v.clamp(0.0, 1.0)), &out)?;
    let metrics = truth.as_ref().map(|t| compute_metrics(&image, t)).transpose()?;
    emit(json!({
        "image": out,
        "measurements": set.len(),
        "metrics": metrics,
    }));
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let sessions = a
        .sessions
        .iter()
        .map(SessionLog::open)
        .collect::<dal::Result<Vec<_>>>()?;
    let report = aggregate(&sessions)?;
    if let Some(dir) = &a.out_dir {
        let dir = output_dir(dir)?;
        report.write_csv(dir.join("report.csv"))?;
        for metric in ["psnr", "ssim"] {
            std::fs::write(dir.join(format!("{metric}.svg")), plot_svg(&report, metric)?)?;
        }
    }
    match a.target_psnr {
        Some(target) => {
            for row in measurements_to_target(&report, target)? {
                emit(serde_json::to_value(&row)?);
            }
        }
        None => {
            for method in report.methods() {
                let last = report
                    .curve(method, "psnr")
                    .and_then(|c| c.points.last())
                    .map(|p| json!({"step": p.step, "mean": p.mean, "se": p.se}));
                emit(json!({"method": method, "final_psnr": last}));
            }
        }
    }
    Ok(())
}
