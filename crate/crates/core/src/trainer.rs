//! The three-player training loop, its optimizer and checkpoints.
//!
//! One iteration runs `d_steps_per_g` discriminator steps, then one
//! generator step, then (self-labeled mode only) one clustering step. Each
//! step binds the other two networks as graph constants, so it can only ever
//! change its own network's parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{self, ConfigError, Entries, Writer};
use crate::data::{augment, sample_condition, sample_latent, AugmentationPolicy, Batch, DataError, DatasetHandle, EpochSampler};
use crate::graph::{Graph, Tensor};
use crate::losses::{self, LossBreakdown, LossError, Weights};
use crate::models::nn::{commit, Pass};
use crate::models::{ArchConfig, ClusteringNet, Discriminator, Generator, ModelError, NetworkParams, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// No labels anywhere: plain hinge GAN.
    Ugan,
    /// Ground-truth one-hot labels on real data; no clustering network.
    Cgan,
    /// Labels on real data come from the clustering network.
    Slcgan,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ugan => "ugan",
            Mode::Cgan => "cgan",
            Mode::Slcgan => "slcgan",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub k: usize,
    pub d_steps_per_g: usize,
    pub learning_rate: f64,
    /// Learning rate of the clustering network.
    pub c_learning_rate: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub weights: Weights,
    /// Also let the mutual-information term update the clustering network.
    pub mi_updates_c: bool,
    pub seed: u64,
    /// Recorded for reproducibility. Training is always sequential.
    pub deterministic: bool,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Slcgan,
            k: 8,
            d_steps_per_g: 2,
            learning_rate: 1e-4,
            c_learning_rate: 1e-4,
            betas: (0.0, 0.999),
            adam_eps: 1e-8,
            batch_size: 64,
            total_iterations: 1000,
            weights: Weights::default(),
            mi_updates_c: false,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Returns the offending key and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.k == 0 {
            return Err(("train.k", "must be at least 1".into()));
        }
        if self.d_steps_per_g == 0 {
            return Err(("train.d_steps_per_g", "must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("train.learning_rate", "must be positive".into()));
        }
        if !(self.c_learning_rate > 0.0 && self.c_learning_rate.is_finite()) {
            return Err(("train.c_learning_rate", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) {
            return Err(("train.beta1", "must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.betas.1) {
            return Err(("train.beta2", "must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(("train.adam_eps", "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(("train.batch_size", "must be positive".into()));
        }
        for (key, w) in [("train.lambda_adv", self.weights.adv), ("train.lambda_mi", self.weights.mi), ("train.lambda_aug", self.weights.aug)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err((key, "must be a nonnegative number".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at iteration {iteration} in the {step} step: {detail}")]
    Divergence { iteration: u64, step: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn for_params(net: &NetworkParams) -> Self {
        let zeros: BTreeMap<_, _> = net.params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.raw_dim()))).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64, betas: (f64, f64), eps: f64) {
        self.t += 1;
        let (b1, b2) = betas;
        let t = self.t as i32;
        let step = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self.m.get_mut(name).expect("moment buffers cover every parameter");
            let v = self.v.get_mut(name).expect("moment buffers cover every parameter");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub g: Generator,
    pub d: Discriminator,
    /// Present in self-labeled mode only.
    pub c: Option<ClusteringNet>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_c: Option<Adam>,
    pub rng: ChaCha8Rng,
    pub sampler: EpochSampler,
    /// Opaque run configuration stored alongside the state; empty when
    /// training is driven from code.
    pub config_text: String,
}

/// Offsets the data-order seed from the parameter/noise seed.
const SAMPLER_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

impl TrainState {
    pub fn init(config: &TrainConfig, arch: &ArchConfig, data: &DatasetHandle) -> Result<Self, TrainError> {
        config.validate().map_err(|(k, m)| TrainError::Config(format!("{k}: {m}")))?;
        arch.validate()?;
        if arch.k != config.k {
            return Err(TrainError::Config(format!("architecture k={} but training k={}", arch.k, config.k)));
        }
        if arch.conditional != (config.mode != Mode::Ugan) {
            return Err(TrainError::Config(format!("architecture conditioning does not match mode {}", config.mode)));
        }
        if data.sample_shape() != arch.data_shape.as_slice() {
            return Err(TrainError::Config(format!("dataset samples are {:?}, architecture expects {:?}", data.sample_shape(), arch.data_shape)));
        }
        if config.batch_size > data.len() {
            return Err(TrainError::Config(format!("batch size {} exceeds dataset size {}", config.batch_size, data.len())));
        }
        if config.mode == Mode::Cgan {
            match data.num_classes() {
                Some(j) if j == config.k => {}
                Some(j) => return Err(TrainError::Config(format!("cgan mode needs k equal to the {j} dataset classes, got {}", config.k))),
                None => return Err(TrainError::Config("cgan mode needs a labeled dataset".into())),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = Generator::new(arch, &mut rng)?;
        let d = Discriminator::new(arch, &mut rng)?;
        let c = match config.mode {
            Mode::Slcgan => Some(ClusteringNet::new(arch, &mut rng)?),
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            iteration: 0,
            opt_g: Adam::for_params(&g.net),
            opt_d: Adam::for_params(&d.net),
            opt_c: c.as_ref().map(|c| Adam::for_params(&c.net)),
            g,
            d,
            c,
            rng,
            sampler: EpochSampler::new(config.seed.wrapping_add(SAMPLER_SEED_OFFSET), data.len()),
            config_text: String::new(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.g.arch
    }

    fn diverged(&self, step: &'static str, detail: String) -> TrainError {
        TrainError::Divergence { iteration: self.iteration, step, detail }
    }
}

/// SHA-256 over parameter names and values, for update-isolation audits.
pub fn param_digest(net: &NetworkParams) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in &net.params {
        h.update(name.as_bytes());
        for v in t.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn onehot(labels: &[usize], k: usize) -> Result<Array2<f64>, TrainError> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(TrainError::Config(format!("label {l} out of range for k={k}")));
        }
        out[[i, l]] = 1.0;
    }
    Ok(out)
}

fn grads_finite(grads: &BTreeMap<String, Tensor>) -> bool {
    grads.values().all(|t| t.iter().all(|v| v.is_finite()))
}

/// One discriminator update on `real`; returns the hinge loss.
pub fn d_step(state: &mut TrainState, real: &Batch) -> Result<f64, TrainError> {
    let cfg = state.config.clone();
    let arch = state.arch().clone();
    let n = real.x.shape()[0];
    let mut g = Graph::new();
    let x_real = g.constant(real.x.clone());
    let y_real = match cfg.mode {
        Mode::Ugan => None,
        Mode::Cgan => {
            let labels = real.labels.as_ref().ok_or_else(|| TrainError::Config("cgan mode needs labeled batches".into()))?;
            Some(g.constant(onehot(labels, cfg.k)?.into_dyn()))
        }
        Mode::Slcgan => {
            let c = state.c.as_ref().expect("self-labeled state has a clustering network");
            let mut pass = Pass::new(&mut g, &c.net, "c", Phase::Frozen, false);
            Some(c.forward(&mut pass, x_real).probs)
        }
    };
    let z = sample_latent(n, arch.d_z, &mut state.rng);
    let cond = arch.conditional.then(|| sample_condition(n, cfg.k, &mut state.rng));
    let zv = g.constant(z.0.into_dyn());
    let cv = cond.map(|c| g.constant(c.onehot.into_dyn()));
    let x_fake = {
        let mut pass = Pass::new(&mut g, &state.g.net, "g", Phase::Frozen, false);
        state.g.forward(&mut pass, zv, cv)
    };
    let mut pass = Pass::new(&mut g, &state.d.net, "d", Phase::Train, true);
    let real_scores = state.d.forward(&mut pass, x_real, y_real);
    let fake_scores = state.d.forward(&mut pass, x_fake, cv);
    let updates = pass.into_updates();
    let loss = losses::d_hinge(&mut g, real_scores, fake_scores)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(state.diverged("discriminator", format!("d_hinge = {value}")));
    }
    let objective = g.scale(loss, cfg.weights.adv);
    let grads = g.backward(objective);
    let pg = g.param_grads(&grads, "d.");
    if !grads_finite(&pg) {
        return Err(state.diverged("discriminator", "non-finite gradient".into()));
    }
    state.opt_d.step(&mut state.d.net.params, &pg, cfg.learning_rate, cfg.betas, cfg.adam_eps);
    commit(&mut state.d.net, updates);
    Ok(value)
}

/// One generator update on fresh noise; returns `(g_adv, g_mi)`.
pub fn g_step(state: &mut TrainState) -> Result<(f64, f64), TrainError> {
    let cfg = state.config.clone();
    let arch = state.arch().clone();
    let n = cfg.batch_size;
    let z = sample_latent(n, arch.d_z, &mut state.rng);
    let cond = arch.conditional.then(|| sample_condition(n, cfg.k, &mut state.rng));
    let mut g = Graph::new();
    let zv = g.constant(z.0.into_dyn());
    let cv = cond.map(|c| g.constant(c.onehot.into_dyn()));
    let (x_fake, g_updates) = {
        let mut pass = Pass::new(&mut g, &state.g.net, "g", Phase::Train, true);
        let x = state.g.forward(&mut pass, zv, cv);
        (x, pass.into_updates())
    };
    let scores = {
        let mut pass = Pass::new(&mut g, &state.d.net, "d", Phase::Frozen, false);
        state.d.forward(&mut pass, x_fake, cv)
    };
    let adv = losses::g_adv(&mut g, scores)?;
    let mi = match (&state.c, cv) {
        (Some(c), Some(onehot)) if cfg.mode == Mode::Slcgan => {
            let mut pass = Pass::new(&mut g, &c.net, "c", Phase::Frozen, cfg.mi_updates_c);
            let probs = c.forward(&mut pass, x_fake).probs;
            Some(losses::mutual_information(&mut g, probs, onehot)?)
        }
        _ => None,
    };
    let adv_value = g.scalar(adv);
    let mi_value = mi.map_or(0.0, |m| g.scalar(m));
    if !adv_value.is_finite() || !mi_value.is_finite() {
        return Err(state.diverged("generator", format!("g_adv = {adv_value}, g_mi = {mi_value}")));
    }
    let mut objective = g.scale(adv, cfg.weights.adv);
    if let Some(m) = mi {
        let weighted = g.scale(m, cfg.weights.mi);
        objective = g.add(objective, weighted);
    }
    let grads = g.backward(objective);
    let pg = g.param_grads(&grads, "g.");
    let pc = g.param_grads(&grads, "c.");
    if !grads_finite(&pg) || !grads_finite(&pc) {
        return Err(state.diverged("generator", "non-finite gradient".into()));
    }
    state.opt_g.step(&mut state.g.net.params, &pg, cfg.learning_rate, cfg.betas, cfg.adam_eps);
    commit(&mut state.g.net, g_updates);
    if !pc.is_empty() {
        let c = state.c.as_mut().expect("clustering gradients imply a clustering network");
        let opt = state.opt_c.as_mut().expect("clustering network has an optimizer");
        opt.step(&mut c.net.params, &pc, cfg.c_learning_rate, cfg.betas, cfg.adam_eps);
    }
    Ok((adv_value, mi_value))
}

/// One clustering update on `real`; returns `(c_adv, c_aug)`. A no-op
/// outside self-labeled mode.
pub fn c_step(state: &mut TrainState, real: &Batch, policy: &AugmentationPolicy) -> Result<(f64, f64), TrainError> {
    if state.config.mode != Mode::Slcgan {
        return Ok((0.0, 0.0));
    }
    let cfg = state.config.clone();
    let x_aug = augment(&real.x, policy, &mut state.rng)?;
    let c = state.c.as_ref().expect("self-labeled state has a clustering network");
    let mut g = Graph::new();
    let xv = g.constant(real.x.clone());
    let xt = g.constant(x_aug);
    let (p, q, updates) = {
        let mut pass = Pass::new(&mut g, &c.net, "c", Phase::Train, true);
        let p = c.forward(&mut pass, xv).probs;
        let q = c.forward(&mut pass, xt).probs;
        (p, q, pass.into_updates())
    };
    let scores = {
        let mut pass = Pass::new(&mut g, &state.d.net, "d", Phase::Frozen, false);
        state.d.forward(&mut pass, xv, Some(p))
    };
    let adv = losses::c_adv(&mut g, scores)?;
    let aug = losses::aug_consistency(&mut g, p, q)?;
    let (adv_value, aug_value) = (g.scalar(adv), g.scalar(aug));
    if !adv_value.is_finite() || !aug_value.is_finite() {
        return Err(state.diverged("clustering", format!("c_adv = {adv_value}, c_aug = {aug_value}")));
    }
    let a = g.scale(adv, cfg.weights.adv);
    let b = g.scale(aug, cfg.weights.aug);
    let objective = g.add(a, b);
    let grads = g.backward(objective);
    let pc = g.param_grads(&grads, "c.");
    if !grads_finite(&pc) {
        return Err(state.diverged("clustering", "non-finite gradient".into()));
    }
    let c = state.c.as_mut().expect("checked above");
    let opt = state.opt_c.as_mut().expect("clustering network has an optimizer");
    opt.step(&mut c.net.params, &pc, cfg.c_learning_rate, cfg.betas, cfg.adam_eps);
    commit(&mut c.net, updates);
    Ok((adv_value, aug_value))
}

/// Loss values of one iteration; `d_hinge` averages the discriminator steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub losses: LossBreakdown,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "iteration,d_hinge,g_adv,g_mi,c_adv,c_aug";

    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.iteration, l.d_hinge, l.g_adv, l.g_mi, l.c_adv, l.c_aug)
    }
}

/// Runs one full iteration: discriminator steps, generator step, clustering
/// step on a fresh real batch.
pub fn iterate(state: &mut TrainState, policy: &AugmentationPolicy, data: &DatasetHandle) -> Result<MetricRow, TrainError> {
    let bs = state.config.batch_size;
    let mut d_total = 0.0;
    for _ in 0..state.config.d_steps_per_g {
        let batch = state.sampler.next_batch(data, bs);
        d_total += d_step(state, &batch)?;
    }
    let (g_adv, g_mi) = g_step(state)?;
    let (c_adv, c_aug) = if state.config.mode == Mode::Slcgan {
        let batch = state.sampler.next_batch(data, bs);
        c_step(state, &batch, policy)?
    } else {
        (0.0, 0.0)
    };
    state.iteration += 1;
    let losses = LossBreakdown { d_hinge: d_total / state.config.d_steps_per_g as f64, g_adv, g_mi, c_adv, c_aug };
    Ok(MetricRow { iteration: state.iteration, losses })
}

/// Hooks for persisting progress while the loop runs.
pub trait Observer {
    fn on_iteration(&mut self, _state: &TrainState, _row: &MetricRow) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called at the checkpoint cadence and once at the end.
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called with the last consistent state before a divergence error is
    /// returned.
    fn on_divergence(&mut self, _state: &TrainState, _error: &TrainError) {}
}

impl Observer for () {}

/// Continues `state` until the configured iteration count.
pub fn run(state: &mut TrainState, policy: &AugmentationPolicy, data: &DatasetHandle, observer: &mut dyn Observer) -> Result<Vec<MetricRow>, TrainError> {
    let mut rows = Vec::new();
    let every = state.config.checkpoint_every;
    let mut saved_at = None;
    while state.iteration < state.config.total_iterations {
        let row = match iterate(state, policy, data) {
            Ok(row) => row,
            Err(e) => {
                if matches!(e, TrainError::Divergence { .. }) {
                    observer.on_divergence(state, &e);
                }
                return Err(e);
            }
        };
        observer.on_iteration(state, &row)?;
        rows.push(row);
        if every > 0 && state.iteration % every == 0 {
            observer.on_checkpoint(state)?;
            saved_at = Some(state.iteration);
        }
    }
    if saved_at != Some(state.iteration) {
        observer.on_checkpoint(state)?;
    }
    Ok(rows)
}

/// Initializes and trains for `config.total_iterations` iterations.
pub fn train_loop(
    config: &TrainConfig,
    arch: &ArchConfig,
    policy: &AugmentationPolicy,
    data: &DatasetHandle,
) -> Result<(TrainState, Vec<MetricRow>), TrainError> {
    let mut state = TrainState::init(config, arch, data)?;
    let rows = run(&mut state, policy, data, &mut ())?;
    Ok((state, rows))
}

const MAGIC: &[u8; 8] = b"SLCGANCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of the architecture description.
pub fn arch_hash(arch: &ArchConfig) -> String {
    hex(&Sha256::digest(arch.describe().as_bytes()))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    out.push(DTYPE_F64);
    put_u64(out, t.ndim() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn network_records(tag: &str, net: &NetworkParams, opt: &Adam) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (k, t) in &net.params {
        out.push((format!("{tag}/param/{k}"), t.clone()));
    }
    for (k, t) in &net.buffers {
        out.push((format!("{tag}/buffer/{k}"), t.clone()));
    }
    for (k, t) in &opt.m {
        out.push((format!("{tag}/adam_m/{k}"), t.clone()));
    }
    for (k, t) in &opt.v {
        out.push((format!("{tag}/adam_v/{k}"), t.clone()));
    }
    out
}

/// Serializes the state; see [`save_checkpoint`] for the layout.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.kv("format_version", FORMAT_VERSION);
    w.kv("arch_hash", arch_hash(state.arch()));
    w.kv("iteration", state.iteration);
    w.kv("sampler.seed", state.sampler.seed);
    w.kv("sampler.epoch", state.sampler.epoch);
    w.kv("sampler.cursor", state.sampler.cursor);
    w.kv("adam.g.t", state.opt_g.t);
    w.kv("adam.d.t", state.opt_d.t);
    if let Some(o) = &state.opt_c {
        w.kv("adam.c.t", o.t);
    }
    config::write_arch(&mut w, state.arch(), true);
    config::write_train(&mut w, &state.config);
    let manifest = w.finish();

    let mut records = network_records("g", &state.g.net, &state.opt_g);
    records.extend(network_records("d", &state.d.net, &state.opt_d));
    if let (Some(c), Some(o)) = (&state.c, &state.opt_c) {
        records.extend(network_records("c", &c.net, o));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, manifest.as_bytes());
    put_bytes(&mut out, state.config_text.as_bytes());
    put_u64(&mut out, records.len() as u64);
    for (name, t) in &records {
        put_tensor(&mut out, name, t);
    }
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes a checkpoint atomically.
///
/// Layout: magic, format version, key/value manifest (format version,
/// architecture hash, iteration, optimizer and sampler counters, full
/// architecture and training configuration), stored run configuration,
/// named tensor records (name, dtype, shape, little-endian data), generator
/// state, and a SHA-256 trailer over everything before it.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_checkpoint(state)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes).map_err(|reason| TrainError::Checkpoint { path: path.to_path_buf(), reason })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err("truncated".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| "length field out of range".to_string())
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, String> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err("truncated".into());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err("integrity check failed (truncated or corrupted)".into());
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, this build reads {FORMAT_VERSION}"));
    }
    let manifest = r.string()?;
    let config_text = r.string()?;
    let count = r.len()?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(format!("{name}: unsupported dtype tag {dtype}"));
        }
        let ndim = r.len()?;
        let shape: Vec<usize> = (0..ndim).map(|_| r.len()).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| format!("{name}: {e}"))?;
        if records.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate record {name}"));
        }
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != body.len() {
        return Err("trailing bytes after generator state".into());
    }

    let cfg_err = |e: ConfigError| format!("manifest: {e}");
    let mut e = Entries::parse(&manifest).map_err(cfg_err)?;
    let fv: u32 = e.take_required("format_version").map_err(cfg_err)?;
    if fv != FORMAT_VERSION {
        return Err(format!("manifest format version {fv}"));
    }
    let hash: String = e.take_required("arch_hash").map_err(cfg_err)?;
    let iteration: u64 = e.take_required("iteration").map_err(cfg_err)?;
    let s_seed: u64 = e.take_required("sampler.seed").map_err(cfg_err)?;
    let s_epoch: u64 = e.take_required("sampler.epoch").map_err(cfg_err)?;
    let s_cursor: usize = e.take_required("sampler.cursor").map_err(cfg_err)?;
    let t_g: u64 = e.take_required("adam.g.t").map_err(cfg_err)?;
    let t_d: u64 = e.take_required("adam.d.t").map_err(cfg_err)?;
    let t_c: Option<u64> = e.take_opt("adam.c.t").map_err(cfg_err)?;
    if !e.contains("arch.k") || !e.contains("arch.data_shape") || !e.contains("arch.conditional") {
        return Err("manifest lacks the full architecture".into());
    }
    let arch = config::read_arch(&mut e, 0, &[], false).map_err(cfg_err)?;
    let config = config::read_train(&mut e).map_err(cfg_err)?;
    e.finish().map_err(cfg_err)?;
    if arch_hash(&arch) != hash {
        return Err("architecture hash mismatch".into());
    }

    // Fresh networks define the exact set of records and shapes expected.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut g = Generator::new(&arch, &mut scratch).map_err(|e| e.to_string())?;
    let mut d = Discriminator::new(&arch, &mut scratch).map_err(|e| e.to_string())?;
    let mut c = match config.mode {
        Mode::Slcgan => Some(ClusteringNet::new(&arch, &mut scratch).map_err(|e| e.to_string())?),
        _ => None,
    };
    if c.is_some() != t_c.is_some() {
        return Err("clustering optimizer presence does not match mode".into());
    }
    let mut opt_g = Adam { t: t_g, ..Adam::for_params(&g.net) };
    let mut opt_d = Adam { t: t_d, ..Adam::for_params(&d.net) };
    let mut opt_c = c.as_ref().map(|c| Adam { t: t_c.unwrap_or(0), ..Adam::for_params(&c.net) });

    let mut fill = |tag: &str, net: &mut NetworkParams, opt: &mut Adam| -> Result<(), String> {
        let slots: [(&str, &mut BTreeMap<String, Tensor>); 4] =
            [("param", &mut net.params), ("buffer", &mut net.buffers), ("adam_m", &mut opt.m), ("adam_v", &mut opt.v)];
        for (kind, map) in slots {
            for (key, slot) in map.iter_mut() {
                let name = format!("{tag}/{kind}/{key}");
                let t = records.remove(&name).ok_or_else(|| format!("missing record {name}"))?;
                if t.shape() != slot.shape() {
                    return Err(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape()));
                }
                *slot = t;
            }
        }
        Ok(())
    };
    fill("g", &mut g.net, &mut opt_g)?;
    fill("d", &mut d.net, &mut opt_d)?;
    if let (Some(c), Some(o)) = (c.as_mut(), opt_c.as_mut()) {
        fill("c", &mut c.net, o)?;
    }
    if let Some(extra) = records.keys().next() {
        return Err(format!("unexpected record {extra}"));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        iteration,
        g,
        d,
        c,
        opt_g,
        opt_d,
        opt_c,
        rng,
        sampler: EpochSampler::restore(s_seed, s_epoch, s_cursor),
        config,
        config_text,
    })
}
