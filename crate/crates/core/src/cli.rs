//! Command implementations behind the `slcgan` binary.
//!
//! Every command is a plain function so it can be driven from tests. Errors
//! split into validation failures (exit code 1) and runtime failures (exit
//! code 2).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExtractorConfig, RunConfig, DATA_ROOT_ENV};
use crate::data::{decode_image, sample_condition, sample_latent, DatasetHandle};
use crate::metrics::{self, ClassifierExtractor, ContingencyTable, FeatureExtractor, IdentityExtractor, RandomProjection};
use crate::models::{ConditioningCode, Family, LatentCode, Phase};
use crate::trainer::{self, load_checkpoint, save_checkpoint, MetricRow, Observer, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(format!("invalid config: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<metrics::MetricError> for CliError {
    fn from(e: metrics::MetricError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "slcgan", version, about = "Self-labeled conditional GAN training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write a sample grid: one row per cluster id, one column per noise draw.
    Sample(SampleArgs),
    /// Generate new samples in the predicted cluster of an input image.
    Resample(ResampleArgs),
    /// Export per-cluster panels of real and generated samples.
    ClusterExport(ClusterExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides `out.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated: purity, accuracy, histogram, kmeans, probe, fid, is, coverage.
    #[arg(long, default_value = "purity,accuracy,histogram")]
    pub metrics: String,
    /// Report directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cluster ids, one per row; defaults to `0..rows`.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
    /// Output file (`.png` for images, `.csv` for points).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Output directory for the strip and its sidecar.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ClusterExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cluster ids to export; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Vec<usize>,
    #[arg(long = "top-n", default_value_t = 8)]
    pub top_n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => cmd_eval(&a).map(|r| {
            for (k, v) in &r.values {
                println!("{k} = {v}");
            }
        }),
        Command::Sample(a) => cmd_sample(&a),
        Command::Resample(a) => cmd_resample(&a).map(|r| println!("cluster = {}\nconfidence = {}", r.cluster, r.confidence)),
        Command::ClusterExport(a) => cmd_cluster_export(&a).map(|_| ()),
    }
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

fn open_dataset(cfg: &RunConfig) -> Result<DatasetHandle, CliError> {
    let source = cfg.data.source(data_root().as_deref());
    DatasetHandle::open(source).map_err(|e| CliError::Runtime(format!("dataset: {e}")))
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::parse(&text)?)
}

fn load(path: &Path) -> Result<TrainState, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Config passed explicitly, else the one stored in the checkpoint.
fn run_config(state: &TrainState, explicit: Option<&Path>) -> Result<RunConfig, CliError> {
    match explicit {
        Some(p) => read_config(p),
        None if !state.config_text.is_empty() => Ok(RunConfig::parse(&state.config_text)?),
        None => Err(CliError::Validation("checkpoint stores no run configuration; pass --config".into())),
    }
}

/// Maps `[-1, 1]` to `[0, 255]` with round-half-even.
pub fn to_pixel(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round_ties_even() as u8
}

pub const GRID_PADDING: u32 = 2;
pub const GRID_FILL: u8 = 128;

/// Tiles `(n, c, h, w)` images row-major into a `rows x cols` grid with a
/// mid-gray border of [`GRID_PADDING`] pixels around every tile.
pub fn image_grid(images: &ArrayD<f64>, rows: usize, cols: usize) -> image::RgbImage {
    let (c, h, w) = (images.shape()[1], images.shape()[2] as u32, images.shape()[3] as u32);
    let p = GRID_PADDING;
    let width = cols as u32 * w + (cols as u32 + 1) * p;
    let height = rows as u32 * h + (rows as u32 + 1) * p;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([GRID_FILL; 3]));
    for idx in 0..images.shape()[0].min(rows * cols) {
        let (r, col) = ((idx / cols) as u32, (idx % cols) as u32);
        let (ox, oy) = (p + col * (w + p), p + r * (h + p));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_pixel(images[[idx, ch.min(c - 1), y as usize, x as usize]]);
                img.put_pixel(ox + x, oy + y, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    img
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

/// Point samples as `x,y,...,cluster` CSV.
fn points_csv(points: &ArrayD<f64>, ids: Option<&[usize]>) -> String {
    let pts = points.view().into_shape_with_order((points.shape()[0], points.len() / points.shape()[0].max(1))).expect("points");
    let mut out = String::new();
    let dims: Vec<String> = (0..pts.ncols()).map(|d| format!("x{d}")).collect();
    out.push_str(&format!("{},cluster\n", dims.join(",")));
    for (i, row) in pts.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let id = ids.map_or(String::new(), |ids| ids[i].to_string());
        out.push_str(&format!("{},{id}\n", vals.join(",")));
    }
    out
}

/// Generates samples in chunks; `cond` is ignored for unconditional models.
fn generate(state: &TrainState, z: &LatentCode, cond: Option<&ConditioningCode>) -> Result<ArrayD<f64>, CliError> {
    const CHUNK: usize = 500;
    let n = z.batch();
    let mut parts = Vec::new();
    let conditional = state.arch().conditional;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let zc = LatentCode(z.0.slice(ndarray::s![start..end, ..]).to_owned());
        let label = cond.filter(|_| conditional).map(|c| c.onehot.slice(ndarray::s![start..end, ..]).to_owned());
        parts.push(state.g.generate(&zc, label.as_ref(), Phase::Eval).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cluster_probs(state: &TrainState, x: &ArrayD<f64>) -> Result<Array2<f64>, CliError> {
    let c = state
        .c
        .as_ref()
        .ok_or_else(|| CliError::Validation(format!("a {} checkpoint has no clustering network", state.config.mode)))?;
    const CHUNK: usize = 500;
    let n = x.shape()[0];
    let mut out = Array2::zeros((n, state.config.k));
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let part = x.slice_axis(Axis(0), (start..end).into()).to_owned();
        let p = c.probs(&part, Phase::Eval).map_err(|e| CliError::Runtime(e.to_string()))?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&p.0);
    }
    Ok(out)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Writes training progress into the run directory.
struct RunWriter {
    dir: PathBuf,
    csv: fs::File,
    sample_every: u64,
    seed: u64,
}

impl RunWriter {
    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn samples(&self, state: &TrainState) -> Result<(), CliError> {
        let k = state.config.k.min(10);
        let cols = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let z = sample_latent(k * cols, state.arch().d_z, &mut rng);
        let ids: Vec<usize> = (0..k * cols).map(|i| i / cols).collect();
        let cond = ConditioningCode::from_indices(ids.clone(), state.config.k).map_err(|e| CliError::Runtime(e.to_string()))?;
        let x = generate(state, &z, Some(&cond))?;
        let stem = self.dir.join("samples").join(format!("iter_{:08}", state.iteration));
        match state.arch().family {
            Family::Conv => save_png(&image_grid(&x, k, cols), &stem.with_extension("png")),
            Family::Mlp => write_text(&stem.with_extension("csv"), &points_csv(&x, Some(&ids))),
        }
    }
}

fn runtime(e: CliError) -> TrainError {
    TrainError::Io { path: PathBuf::new(), source: std::io::Error::other(e.to_string()) }
}

impl Observer for RunWriter {
    fn on_iteration(&mut self, state: &TrainState, row: &MetricRow) -> Result<(), TrainError> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.csv, "{}", row.to_csv()).map_err(|source| TrainError::Io { path, source })?;
        if self.sample_every > 0 && state.iteration % self.sample_every == 0 {
            self.samples(state).map_err(runtime)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<(), TrainError> {
        save_checkpoint(state, &self.checkpoint_path(&format!("iter_{:08}.ckpt", state.iteration)))?;
        save_checkpoint(state, &self.checkpoint_path("latest.ckpt"))
    }

    fn on_divergence(&mut self, state: &TrainState, error: &TrainError) {
        let path = self.checkpoint_path(&format!("diverged_{:08}.ckpt", state.iteration));
        match save_checkpoint(state, &path) {
            Ok(()) => eprintln!("{error}; diagnostic checkpoint written to {}", path.display()),
            Err(e) => eprintln!("{error}; diagnostic checkpoint failed: {e}"),
        }
    }
}

/// Trains from a config file and returns the run directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let data = open_dataset(&cfg)?;
    let mut state = TrainState::init(&cfg.train, &cfg.arch, &data)?;
    let resolved = cfg.to_text();
    state.config_text = resolved.clone();

    let dir = cfg.out_dir.clone();
    for sub in ["checkpoints", "samples", "clusters", "eval"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir))?;
    }
    write_text(&dir.join("config.resolved"), &resolved)?;
    let csv_path = dir.join("metrics.csv");
    let mut csv = fs::File::create(&csv_path).map_err(io(&csv_path))?;
    writeln!(csv, "{}", MetricRow::CSV_HEADER).map_err(io(&csv_path))?;
    let mut writer = RunWriter { dir: dir.clone(), csv, sample_every: cfg.eval.sample_every, seed: cfg.train.seed };
    trainer::run(&mut state, &cfg.augment, &data, &mut writer)?;
    Ok(dir)
}

/// Metric values produced by [`cmd_eval`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub iteration: u64,
    pub values: BTreeMap<String, f64>,
    pub histograms: BTreeMap<String, Vec<usize>>,
}

const METRICS: [&str; 8] = ["purity", "accuracy", "histogram", "kmeans", "probe", "fid", "is", "coverage"];

fn build_extractor(cfg: &RunConfig) -> Result<Box<dyn FeatureExtractor>, CliError> {
    let shape = &cfg.arch.data_shape;
    match &cfg.eval.extractor {
        ExtractorConfig::None => Err(CliError::Validation("fid and is need a feature extractor; set eval.extractor".into())),
        ExtractorConfig::Identity => Ok(Box::new(IdentityExtractor { dim: shape.iter().product() })),
        ExtractorConfig::RandomProjection { dim, seed } => Ok(Box::new(RandomProjection::new(shape, *dim, *seed)?)),
        ExtractorConfig::Classifier { checkpoint } => {
            let state = load(checkpoint)?;
            let net = state.c.ok_or_else(|| CliError::Validation(format!("{} has no classifier network", checkpoint.display())))?;
            Ok(Box::new(ClassifierExtractor { net }))
        }
    }
}

fn features_chunked(ex: &dyn FeatureExtractor, x: &ArrayD<f64>, probs: bool) -> Result<Array2<f64>, CliError> {
    let mut parts = Vec::new();
    for start in (0..x.shape()[0]).step_by(500) {
        let end = (start + 500).min(x.shape()[0]);
        let part = x.slice_axis(Axis(0), (start..end).into()).to_owned();
        parts.push(if probs { ex.class_probs(&part)? } else { ex.features(&part)? });
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Computes the requested metrics and writes `metrics.csv` and
/// `summary.json` (plus histogram CSVs) to the report directory.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let state = load(&args.checkpoint)?;
    let cfg = run_config(&state, args.config.as_deref())?;
    let requested: Vec<String> = args.metrics.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = requested.iter().find(|m| !METRICS.contains(&m.as_str())) {
        return Err(CliError::Validation(format!("unknown metric `{bad}` (expected one of {})", METRICS.join(", "))));
    }
    let wants = |m: &str| requested.iter().any(|r| r == m);
    let needs_extractor = wants("fid") || wants("is");
    let extractor = if needs_extractor { Some(build_extractor(&cfg)?) } else { None };
    if wants("coverage") && cfg.data.gmm_spec().is_none() {
        return Err(CliError::Validation("coverage needs a gmm dataset".into()));
    }
    let data = open_dataset(&cfg)?;
    let labeled = ["purity", "accuracy", "probe"];
    if let Some(m) = labeled.iter().find(|m| wants(m)) {
        if data.labels.is_none() {
            return Err(CliError::Validation(format!("metric `{m}` needs ground-truth labels, but the dataset is unlabeled")));
        }
    }
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EvalReport { iteration: state.iteration, ..EvalReport::default() };
    let k = state.config.k;

    let needs_c = ["purity", "accuracy", "histogram", "kmeans", "probe"].iter().any(|m| wants(m));
    if needs_c {
        let probs = cluster_probs(&state, &data.data)?;
        let assign: Vec<usize> = probs.rows().into_iter().map(argmax).collect();
        if let Some(labels) = &data.labels {
            let j = data.class_names.len();
            let table = ContingencyTable::from_assignments(&assign, labels, k, j)?;
            if wants("purity") {
                report.values.insert("purity".into(), metrics::purity(&table)?);
            }
            if wants("accuracy") {
                report.values.insert("accuracy".into(), metrics::clustering_accuracy(&table)?);
            }
        }
        if wants("histogram") {
            report.histograms.insert("clusters".into(), metrics::cluster_histogram(&assign, k)?);
        }
        if wants("kmeans") || wants("probe") {
            let c = state.c.as_ref().expect("cluster_probs checked the network");
            let mut feats = Vec::new();
            for start in (0..data.len()).step_by(500) {
                let end = (start + 500).min(data.len());
                let part = data.data.slice_axis(Axis(0), (start..end).into()).to_owned();
                feats.push(c.penultimate_features(&part, Phase::Eval).map_err(|e| CliError::Runtime(e.to_string()))?);
            }
            let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
            let feats = ndarray::concatenate(Axis(0), &views).map_err(|e| CliError::Runtime(e.to_string()))?;
            if wants("kmeans") {
                let km = metrics::kmeans(&feats, k, &mut rng)?;
                report.histograms.insert("kmeans".into(), metrics::cluster_histogram(&km.assignments, k)?);
                if let Some(labels) = &data.labels {
                    let table = ContingencyTable::from_assignments(&km.assignments, labels, k, data.class_names.len())?;
                    report.values.insert("kmeans_purity".into(), metrics::purity(&table)?);
                }
            }
            if wants("probe") {
                let labels = data.labels.as_ref().expect("checked above");
                let r = metrics::linear_probe(&feats, labels, cfg.eval.probe_test_fraction, &mut rng)?;
                report.values.insert("probe_accuracy".into(), r.test_accuracy);
            }
        }
    }

    if needs_extractor || wants("coverage") {
        let n = if wants("coverage") && !needs_extractor { 2000 } else { cfg.eval.fid_samples.max(2) };
        let z = sample_latent(n, state.arch().d_z, &mut rng);
        let cond = sample_condition(n, k, &mut rng);
        let fake = generate(&state, &z, Some(&cond))?;
        if let Some(ex) = &extractor {
            if wants("fid") {
                let m = n.min(data.len());
                let real = data.data.slice_axis(Axis(0), (0..m).into()).to_owned();
                let a = metrics::gaussian_stats(&features_chunked(ex.as_ref(), &real, false)?)?;
                let b = metrics::gaussian_stats(&features_chunked(ex.as_ref(), &fake, false)?)?;
                report.values.insert("fid".into(), metrics::frechet_distance(&a, &b)?);
            }
            if wants("is") {
                let probs = features_chunked(ex.as_ref(), &fake, true)?;
                let (mean, std) = metrics::inception_style_score(&probs, cfg.eval.is_splits)?;
                report.values.insert("is_mean".into(), mean);
                report.values.insert("is_std".into(), std);
            }
        }
        if wants("coverage") {
            let spec = cfg.data.gmm_spec().expect("checked above");
            let pts = fake.into_dimensionality::<ndarray::Ix2>().map_err(|e| CliError::Runtime(e.to_string()))?;
            let ids: &[usize] = if state.arch().conditional { &cond.index } else { &[] };
            let cov = metrics::mode_coverage(&pts, ids, &spec)?;
            report.values.insert("modes_covered".into(), cov.covered as f64);
            if let Some(p) = cov.purity {
                report.values.insert("mode_purity".into(), p);
            }
        }
    }

    let out = match &args.out {
        Some(o) => o.clone(),
        None => cfg.out_dir.join("eval"),
    };
    let mut csv = String::from("iteration,metric,value\n");
    for (name, v) in &report.values {
        csv.push_str(&format!("{},{name},{v}\n", report.iteration));
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    for (name, h) in &report.histograms {
        let mut text = String::from("cluster,count\n");
        for (i, c) in h.iter().enumerate() {
            text.push_str(&format!("{i},{c}\n"));
        }
        write_text(&out.join(format!("histogram_{name}.csv")), &text)?;
    }
    let summary = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "iteration": report.iteration,
        "mode": state.config.mode.to_string(),
        "metrics": report.values,
        "histograms": report.histograms,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(report)
}

/// Writes a `rows x cols` grid (or a CSV for point data) plus a metadata
/// sidecar next to it.
pub fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let state = load(&args.checkpoint)?;
    let k = state.config.k;
    let ids: Vec<usize> = if args.clusters.is_empty() { (0..args.rows).collect() } else { args.clusters.clone() };
    if args.clusters.is_empty() && args.rows > k {
        return Err(CliError::Validation(format!("{} rows requested but the model has k = {k}", args.rows)));
    }
    if let Some(bad) = ids.iter().find(|&&c| c >= k) {
        return Err(CliError::Validation(format!("cluster id {bad} exceeds the model's k = {k}")));
    }
    if ids.is_empty() || args.cols == 0 {
        return Err(CliError::Validation("grid needs at least one row and one column".into()));
    }
    let rows = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let z = sample_latent(rows * args.cols, state.arch().d_z, &mut rng);
    let cells: Vec<usize> = (0..rows * args.cols).map(|i| ids[i / args.cols]).collect();
    let cond = ConditioningCode::from_indices(cells.clone(), k).map_err(|e| CliError::Runtime(e.to_string()))?;
    let x = generate(&state, &z, Some(&cond))?;
    let conditioned = state.arch().conditional;
    match state.arch().family {
        Family::Conv => save_png(&image_grid(&x, rows, args.cols), &args.out)?,
        Family::Mlp => write_text(&args.out, &points_csv(&x, conditioned.then_some(cells.as_slice())))?,
    }
    let meta = serde_json::json!({
        "mode": state.config.mode.to_string(),
        "conditioned": conditioned,
        "note": if conditioned { "row r uses cluster id rows[r]" } else { "unconditional model: rows ignore the cluster ids" },
        "rows": ids,
        "cols": args.cols,
        "seed": args.seed,
    });
    write_text(&args.out.with_extension("json"), &serde_json::to_string_pretty(&meta).expect("json"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleReport {
    pub cluster: usize,
    pub confidence: f64,
}

/// Predicts the cluster of an input image and generates `n` new samples
/// conditioned on it.
pub fn cmd_resample(args: &ResampleArgs) -> Result<ResampleReport, CliError> {
    let state = load(&args.checkpoint)?;
    let shape = state.arch().data_shape.clone();
    if state.arch().family != Family::Conv {
        return Err(CliError::Validation("resample needs an image model".into()));
    }
    if args.n == 0 {
        return Err(CliError::Validation("n must be positive".into()));
    }
    let img = decode_image(&args.input, shape[0]).map_err(|e| CliError::Runtime(e.to_string()))?;
    if img.shape() != shape.as_slice() {
        return Err(CliError::Validation(format!("input is {:?}, the model expects {:?}", img.shape(), shape)));
    }
    let x = img.insert_axis(Axis(0));
    let probs = cluster_probs(&state, &x)?;
    let cluster = argmax(probs.row(0));
    let confidence = probs[[0, cluster]];
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let z = sample_latent(args.n, state.arch().d_z, &mut rng);
    let cond = ConditioningCode::from_indices(vec![cluster; args.n], state.config.k).map_err(|e| CliError::Runtime(e.to_string()))?;
    let samples = generate(&state, &z, Some(&cond))?;
    save_png(&image_grid(&samples, 1, args.n), &args.out.join("resample.png"))?;
    let sidecar = format!("cluster = {cluster}\nconfidence = {confidence}\nn = {}\nconditioning = {}\n", args.n, vec![cluster.to_string(); args.n].join(","));
    write_text(&args.out.join("resample.txt"), &sidecar)?;
    Ok(ResampleReport { cluster, confidence })
}

/// Size of the generated pool ranked for each cluster panel.
pub const GENERATED_POOL: usize = 40;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterPanel {
    pub cluster: usize,
    /// Confidences of the real panel, left to right; empty when skipped.
    pub real: Vec<f64>,
    pub generated: Vec<f64>,
}

fn top_by_confidence(probs: &Array2<f64>, members: &[usize], cluster: usize, n: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = members.iter().map(|&i| (i, probs[[i, cluster]])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

fn export_panel(state: &TrainState, x: &ArrayD<f64>, picks: &[(usize, f64)], path: &Path) -> Result<(), CliError> {
    let idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
    let chosen = x.select(Axis(0), &idx);
    match state.arch().family {
        Family::Conv => save_png(&image_grid(&chosen, 1, idx.len().max(1)), &path.with_extension("png"))?,
        Family::Mlp => write_text(&path.with_extension("csv"), &points_csv(&chosen, None))?,
    }
    let conf: Vec<String> = picks.iter().map(|p| p.1.to_string()).collect();
    write_text(&path.with_extension("txt"), &format!("{}\n", conf.join(",")))
}

/// For every requested cluster: the top-n real samples assigned to it by
/// confidence, and the top-n of a generated pool conditioned on it.
pub fn cmd_cluster_export(args: &ClusterExportArgs) -> Result<Vec<ClusterPanel>, CliError> {
    let state = load(&args.checkpoint)?;
    let cfg = run_config(&state, args.config.as_deref())?;
    let k = state.config.k;
    let ids: Vec<usize> = if args.clusters.is_empty() { (0..k).collect() } else { args.clusters.clone() };
    if let Some(bad) = ids.iter().find(|&&c| c >= k) {
        return Err(CliError::Validation(format!("cluster id {bad} exceeds the model's k = {k}")));
    }
    if args.top_n == 0 || args.top_n > GENERATED_POOL {
        return Err(CliError::Validation(format!("top-n must be in 1..={GENERATED_POOL}")));
    }
    let data = open_dataset(&cfg)?;
    let probs = cluster_probs(&state, &data.data)?;
    let assign: Vec<usize> = probs.rows().into_iter().map(argmax).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut panels = Vec::new();
    for &cluster in &ids {
        let mut panel = ClusterPanel { cluster, ..ClusterPanel::default() };
        let members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == cluster).collect();
        if members.is_empty() {
            eprintln!("cluster {cluster} has no real members; real panel skipped");
        } else {
            let picks = top_by_confidence(&probs, &members, cluster, args.top_n);
            export_panel(&state, &data.data, &picks, &args.out.join(format!("cluster_{cluster:03}_real")))?;
            panel.real = picks.iter().map(|p| p.1).collect();
        }
        let z = sample_latent(GENERATED_POOL, state.arch().d_z, &mut rng);
        let cond = ConditioningCode::from_indices(vec![cluster; GENERATED_POOL], k).map_err(|e| CliError::Runtime(e.to_string()))?;
        let fake = generate(&state, &z, Some(&cond))?;
        let fake_probs = cluster_probs(&state, &fake)?;
        let all: Vec<usize> = (0..GENERATED_POOL).collect();
        let picks = top_by_confidence(&fake_probs, &all, cluster, args.top_n);
        export_panel(&state, &fake, &picks, &args.out.join(format!("cluster_{cluster:03}_generated")))?;
        panel.generated = picks.iter().map(|p| p.1).collect();
        panels.push(panel);
    }
    Ok(panels)
}

/// Shape helper for tests and docs: grid raster size in pixels as
/// `(height, width)`.
pub fn grid_size(rows: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    let p = GRID_PADDING as usize;
    (rows * h + (rows + 1) * p, cols * w + (cols + 1) * p)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn pixel_mapping_endpoints_and_ties() {
        assert_eq!(to_pixel(-1.0), 0);
        assert_eq!(to_pixel(1.0), 255);
        // 0 maps to exactly 127.5, which rounds to the even neighbour.
        assert_eq!(to_pixel(0.0), 128);
        assert_eq!(to_pixel(-2.0), 0);
    }

    #[test]
    fn grid_layout_arithmetic() {
        assert_eq!(grid_size(3, 8, 32, 32), (3 * 32 + 4 * 2, 8 * 32 + 9 * 2));
        let imgs = ArrayD::zeros(ndarray::IxDyn(&[2, 1, 4, 5]));
        let g = image_grid(&imgs, 1, 2);
        assert_eq!((g.height(), g.width()), (4 + 4, 2 * 5 + 6));
        assert_eq!(g.get_pixel(0, 0).0, [GRID_FILL; 3]);
        assert_eq!(g.get_pixel(2, 2).0, [128; 3]);
    }

    #[test]
    fn clap_accepts_documented_flags() {
        let cli = Cli::try_parse_from(["slcgan", "cluster-export", "--checkpoint", "a", "--clusters", "1,2", "--top-n", "5", "--out", "o"]).unwrap();
        match cli.command {
            Command::ClusterExport(a) => {
                assert_eq!(a.clusters, vec![1, 2]);
                assert_eq!(a.top_n, 5);
            }
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["slcgan", "train"]).is_err());
    }

    proptest! {
        #[test]
        fn pixel_mapping_is_monotone(a in -1.5..1.5f64, b in -1.5..1.5f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(to_pixel(lo) <= to_pixel(hi));
        }
    }
}
