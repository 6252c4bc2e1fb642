//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! train.mode = slcgan
//! train.k = 8
//! data.source = gmm
//! ```
//!
//! Every key is validated and unknown keys are rejected. [`RunConfig::to_text`]
//! writes every field with defaults resolved, and parsing that text yields
//! the same configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{AugmentationPolicy, GaussianMixtureSpec, Source};
use crate::losses::Weights;
use crate::models::{ArchConfig, Backbone, Family};
use crate::trainer::{Mode, TrainConfig};

/// Environment variable consulted for relative or missing dataset paths.
pub const DATA_ROOT_ENV: &str = "SLCGAN_DATA_ROOT";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("line {line}: unknown key `{key}`")]
    Unknown { key: String, line: usize },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Display) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.to_string() }
}

/// Parsed but not yet interpreted `key = value` pairs.
#[derive(Clone, Debug, Default)]
pub struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("expected `key = value`, got `{body}`") })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(ConfigError::Syntax { line, message: format!("malformed key `{key}`") });
            }
            if map.insert(key.to_string(), (line, value.trim().to_string())).is_some() {
                return Err(ConfigError::Duplicate { key: key.to_string(), line });
            }
        }
        Ok(Self { map })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((_, v)) => v.parse().map(Some).map_err(|e| invalid(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.take_opt(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.take_opt(key)?.ok_or_else(|| invalid(key, "required"))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(ConfigError::Unknown { key, line }),
            None => Ok(()),
        }
    }
}

/// Accumulates `key = value` lines.
#[derive(Default)]
pub struct Writer {
    out: String,
}

impl Writer {
    pub fn section(&mut self, title: &str) {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("# {title}\n"));
    }

    pub fn kv(&mut self, key: &str, value: impl Display) {
        self.out.push_str(&format!("{key} = {value}\n"));
    }

    pub fn finish(self) -> String {
        self.out
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>, ConfigError> {
    s.split(',').map(|p| p.trim().parse().map_err(|e| invalid(key, format!("`{p}`: {e}")))).collect()
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ugan" => Ok(Mode::Ugan),
            "cgan" => Ok(Mode::Cgan),
            "slcgan" => Ok(Mode::Slcgan),
            _ => Err("expected one of ugan, cgan, slcgan".into()),
        }
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "conv" => Ok(Family::Conv),
            _ => Err("expected mlp or conv".into()),
        }
    }
}

impl FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Backbone::Mlp),
            "small" => Ok(Backbone::Small),
            "resnet18" => Ok(Backbone::ResNet18),
            _ => Err("expected mlp, small or resnet18".into()),
        }
    }
}

pub fn write_train(w: &mut Writer, t: &TrainConfig) {
    w.kv("train.mode", t.mode);
    w.kv("train.k", t.k);
    w.kv("train.d_steps_per_g", t.d_steps_per_g);
    w.kv("train.learning_rate", t.learning_rate);
    w.kv("train.c_learning_rate", t.c_learning_rate);
    w.kv("train.beta1", t.betas.0);
    w.kv("train.beta2", t.betas.1);
    w.kv("train.adam_eps", t.adam_eps);
    w.kv("train.batch_size", t.batch_size);
    w.kv("train.iterations", t.total_iterations);
    w.kv("train.lambda_adv", t.weights.adv);
    w.kv("train.lambda_mi", t.weights.mi);
    w.kv("train.lambda_aug", t.weights.aug);
    w.kv("train.mi_updates_c", t.mi_updates_c);
    w.kv("train.seed", t.seed);
    w.kv("train.deterministic", t.deterministic);
    w.kv("train.checkpoint_every", t.checkpoint_every);
}

pub fn read_train(e: &mut Entries) -> Result<TrainConfig, ConfigError> {
    let d = TrainConfig::default();
    let mode = e.take("train.mode", d.mode)?;
    let learning_rate = e.take("train.learning_rate", d.learning_rate)?;
    let t = TrainConfig {
        mode,
        k: e.take("train.k", d.k)?,
        d_steps_per_g: e.take("train.d_steps_per_g", d.d_steps_per_g)?,
        learning_rate,
        c_learning_rate: e.take("train.c_learning_rate", learning_rate)?,
        betas: (e.take("train.beta1", d.betas.0)?, e.take("train.beta2", d.betas.1)?),
        adam_eps: e.take("train.adam_eps", d.adam_eps)?,
        batch_size: e.take("train.batch_size", d.batch_size)?,
        total_iterations: e.take("train.iterations", d.total_iterations)?,
        weights: Weights {
            adv: e.take("train.lambda_adv", d.weights.adv)?,
            mi: e.take("train.lambda_mi", d.weights.mi)?,
            aug: e.take("train.lambda_aug", d.weights.aug)?,
        },
        mi_updates_c: e.take("train.mi_updates_c", d.mi_updates_c)?,
        seed: e.take("train.seed", d.seed)?,
        deterministic: e.take("train.deterministic", d.deterministic)?,
        checkpoint_every: e.take("train.checkpoint_every", d.checkpoint_every)?,
    };
    t.validate().map_err(|(key, msg)| invalid(key, msg))?;
    Ok(t)
}

/// Architecture keys. `full` also writes the fields a run configuration
/// derives from the dataset and mode (`k`, data shape, conditioning).
pub fn write_arch(w: &mut Writer, a: &ArchConfig, full: bool) {
    w.kv("arch.family", a.family);
    w.kv("arch.d_z", a.d_z);
    w.kv("arch.width", a.width);
    w.kv("arch.depth", a.depth);
    w.kv("arch.embed_dim", a.embed_dim);
    w.kv("arch.backbone", a.backbone);
    w.kv("arch.c_width", a.c_width);
    w.kv("arch.sn_g", a.sn_g);
    w.kv("arch.sn_d", a.sn_d);
    w.kv("arch.sn_c", a.sn_c);
    w.kv("arch.point_scale", a.point_scale);
    if full {
        w.kv("arch.k", a.k);
        w.kv("arch.data_shape", join(&a.data_shape));
        w.kv("arch.conditional", a.conditional);
    }
}

/// Reads architecture keys on top of the family defaults for `k` and
/// `data_shape`.
pub fn read_arch(e: &mut Entries, k: usize, data_shape: &[usize], conditional: bool) -> Result<ArchConfig, ConfigError> {
    let family: Family = e.take("arch.family", if data_shape.len() == 1 { Family::Mlp } else { Family::Conv })?;
    let k = e.take("arch.k", k)?;
    let data_shape = match e.take_opt::<String>("arch.data_shape")? {
        Some(s) => parse_list("arch.data_shape", &s)?,
        None => data_shape.to_vec(),
    };
    let base = match family {
        Family::Mlp => {
            let mut a = ArchConfig::mlp(k);
            a.data_shape = data_shape;
            a
        }
        Family::Conv => {
            let (c, r) = (data_shape.first().copied().unwrap_or(3), data_shape.get(1).copied().unwrap_or(32));
            let mut a = ArchConfig::conv(k, c, r);
            a.data_shape = data_shape;
            a
        }
    };
    let a = ArchConfig {
        family,
        k,
        d_z: e.take("arch.d_z", base.d_z)?,
        width: e.take("arch.width", base.width)?,
        depth: e.take("arch.depth", base.depth)?,
        embed_dim: e.take("arch.embed_dim", base.embed_dim)?,
        backbone: e.take("arch.backbone", base.backbone)?,
        c_width: e.take("arch.c_width", base.c_width)?,
        sn_g: e.take("arch.sn_g", base.sn_g)?,
        sn_d: e.take("arch.sn_d", base.sn_d)?,
        sn_c: e.take("arch.sn_c", base.sn_c)?,
        point_scale: e.take("arch.point_scale", base.point_scale)?,
        conditional: e.take("arch.conditional", conditional)?,
        data_shape: base.data_shape,
    };
    a.validate().map_err(|err| invalid("arch", err))?;
    Ok(a)
}

/// Dataset descriptor as written in the config.
#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    Gmm { modes: usize, radius: f64, sigma: f64, samples: usize, seed: u64 },
    ImageDir { path: PathBuf, channels: usize },
    Mnist { path: PathBuf, limit: usize },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Gmm { modes: 8, radius: 1.0, sigma: 0.05, samples: 10_000, seed: 0 }
    }
}

impl DataConfig {
    /// Resolves relative paths against `root` (usually the data-root
    /// environment variable).
    pub fn source(&self, root: Option<&std::path::Path>) -> Source {
        let resolve = |p: &PathBuf| match root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.clone(),
        };
        match self {
            DataConfig::Gmm { modes, radius, sigma, samples, seed } => {
                Source::Gmm { spec: GaussianMixtureSpec::ring(*modes, *radius, *sigma), n: *samples, seed: *seed }
            }
            DataConfig::ImageDir { path, channels } => Source::ImageDir { path: resolve(path), channels: *channels },
            DataConfig::Mnist { path, limit } => Source::Mnist { root: resolve(path), limit: *limit },
        }
    }

    /// Shape of one sample, known without touching the disk.
    pub fn known_shape(&self) -> Option<Vec<usize>> {
        match self {
            DataConfig::Gmm { .. } => Some(vec![2]),
            DataConfig::Mnist { .. } => Some(vec![1, 32, 32]),
            DataConfig::ImageDir { .. } => None,
        }
    }

    pub fn gmm_spec(&self) -> Option<GaussianMixtureSpec> {
        match self {
            DataConfig::Gmm { modes, radius, sigma, .. } => Some(GaussianMixtureSpec::ring(*modes, *radius, *sigma)),
            _ => None,
        }
    }
}

/// How images are mapped to features and class probabilities for FID/IS.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorConfig {
    None,
    Identity,
    RandomProjection { dim: usize, seed: u64 },
    Classifier { checkpoint: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Iterations between sample grids; 0 disables them.
    pub sample_every: u64,
    pub fid_samples: usize,
    pub is_splits: usize,
    pub extractor: ExtractorConfig,
    pub probe_test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sample_every: 0, fid_samples: 10_000, is_splits: 1, extractor: ExtractorConfig::None, probe_test_fraction: 0.2 }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub augment: AugmentationPolicy,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;
        let train = read_train(&mut e)?;
        let data = read_data(&mut e)?;
        let shape = match data.known_shape() {
            Some(s) => s,
            None => {
                let channels = match &data {
                    DataConfig::ImageDir { channels, .. } => *channels,
                    _ => 3,
                };
                let side = e.take("data.resolution", 32usize)?;
                vec![channels, side, side]
            }
        };
        let arch = read_arch(&mut e, train.k, &shape, train.mode != Mode::Ugan)?;
        if arch.k != train.k {
            return Err(invalid("arch.k", format!("{} disagrees with train.k = {}", arch.k, train.k)));
        }
        if arch.conditional != (train.mode != Mode::Ugan) {
            return Err(invalid("arch.conditional", format!("inconsistent with train.mode = {}", train.mode)));
        }
        let digits = matches!(data, DataConfig::Mnist { .. });
        let augment = read_augment(&mut e, digits)?;
        let eval = read_eval(&mut e)?;
        let out_dir = e.take("out.dir", PathBuf::from("runs/default"))?;
        e.finish()?;
        Ok(Self { train, arch, data, augment, eval, out_dir })
    }

    /// Resolved configuration; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let mut w = Writer::default();
        w.section("training");
        write_train(&mut w, &self.train);
        w.section("dataset");
        match &self.data {
            DataConfig::Gmm { modes, radius, sigma, samples, seed } => {
                w.kv("data.source", "gmm");
                w.kv("data.gmm.modes", modes);
                w.kv("data.gmm.radius", radius);
                w.kv("data.gmm.sigma", sigma);
                w.kv("data.gmm.samples", samples);
                w.kv("data.gmm.seed", seed);
            }
            DataConfig::ImageDir { path, channels } => {
                w.kv("data.source", "image_dir");
                w.kv("data.path", path.display());
                w.kv("data.channels", channels);
                w.kv("data.resolution", self.arch.data_shape[1]);
            }
            DataConfig::Mnist { path, limit } => {
                w.kv("data.source", "mnist");
                w.kv("data.path", path.display());
                w.kv("data.limit", limit);
            }
        }
        w.section("architecture");
        write_arch(&mut w, &self.arch, false);
        w.section("augmentation");
        let a = &self.augment;
        w.kv("aug.crop_min", a.crop_scale.0);
        w.kv("aug.crop_max", a.crop_scale.1);
        w.kv("aug.jitter", a.jitter);
        w.kv("aug.hflip", a.hflip_prob);
        w.kv("aug.point_noise", a.point_noise);
        w.section("evaluation");
        w.kv("eval.sample_every", self.eval.sample_every);
        w.kv("eval.fid_samples", self.eval.fid_samples);
        w.kv("eval.is_splits", self.eval.is_splits);
        w.kv("eval.probe_test_fraction", self.eval.probe_test_fraction);
        match &self.eval.extractor {
            ExtractorConfig::None => w.kv("eval.extractor", "none"),
            ExtractorConfig::Identity => w.kv("eval.extractor", "identity"),
            ExtractorConfig::RandomProjection { dim, seed } => {
                w.kv("eval.extractor", "random_projection");
                w.kv("eval.extractor_dim", dim);
                w.kv("eval.extractor_seed", seed);
            }
            ExtractorConfig::Classifier { checkpoint } => {
                w.kv("eval.extractor", "classifier");
                w.kv("eval.classifier_checkpoint", checkpoint.display());
            }
        }
        w.section("output");
        w.kv("out.dir", self.out_dir.display());
        w.finish()
    }
}

fn read_data(e: &mut Entries) -> Result<DataConfig, ConfigError> {
    let source: String = e.take("data.source", "gmm".to_string())?;
    match source.as_str() {
        "gmm" => {
            let modes = e.take("data.gmm.modes", 8usize)?;
            let radius = e.take("data.gmm.radius", 1.0)?;
            let sigma: f64 = e.take("data.gmm.sigma", 0.05)?;
            let samples = e.take("data.gmm.samples", 10_000usize)?;
            let seed = e.take("data.gmm.seed", 0u64)?;
            if modes == 0 {
                return Err(invalid("data.gmm.modes", "must be positive"));
            }
            if !(sigma > 0.0) {
                return Err(invalid("data.gmm.sigma", "must be positive"));
            }
            if samples == 0 {
                return Err(invalid("data.gmm.samples", "must be positive"));
            }
            Ok(DataConfig::Gmm { modes, radius, sigma, samples, seed })
        }
        "image_dir" => {
            let path = e.take("data.path", PathBuf::new())?;
            let channels = e.take("data.channels", 3usize)?;
            if channels != 1 && channels != 3 {
                return Err(invalid("data.channels", "must be 1 or 3"));
            }
            Ok(DataConfig::ImageDir { path, channels })
        }
        "mnist" => Ok(DataConfig::Mnist { path: e.take("data.path", PathBuf::new())?, limit: e.take("data.limit", 10_000usize)? }),
        other => Err(invalid("data.source", format!("unknown source `{other}` (expected gmm, image_dir or mnist)"))),
    }
}

fn read_augment(e: &mut Entries, digits: bool) -> Result<AugmentationPolicy, ConfigError> {
    let d = if digits { AugmentationPolicy::digits() } else { AugmentationPolicy::default() };
    let p = AugmentationPolicy {
        crop_scale: (e.take("aug.crop_min", d.crop_scale.0)?, e.take("aug.crop_max", d.crop_scale.1)?),
        jitter: e.take("aug.jitter", d.jitter)?,
        hflip_prob: e.take("aug.hflip", d.hflip_prob)?,
        point_noise: e.take("aug.point_noise", d.point_noise)?,
    };
    p.validate().map_err(|err| invalid("aug", err))?;
    Ok(p)
}

fn read_eval(e: &mut Entries) -> Result<EvalConfig, ConfigError> {
    let d = EvalConfig::default();
    let kind: String = e.take("eval.extractor", "none".to_string())?;
    let extractor = match kind.as_str() {
        "none" => ExtractorConfig::None,
        "identity" => ExtractorConfig::Identity,
        "random_projection" => ExtractorConfig::RandomProjection {
            dim: e.take("eval.extractor_dim", 64usize)?,
            seed: e.take("eval.extractor_seed", 0u64)?,
        },
        "classifier" => ExtractorConfig::Classifier { checkpoint: e.take_required("eval.classifier_checkpoint")? },
        other => return Err(invalid("eval.extractor", format!("unknown extractor `{other}`"))),
    };
    let eval = EvalConfig {
        sample_every: e.take("eval.sample_every", d.sample_every)?,
        fid_samples: e.take("eval.fid_samples", d.fid_samples)?,
        is_splits: e.take("eval.is_splits", d.is_splits)?,
        probe_test_fraction: e.take("eval.probe_test_fraction", d.probe_test_fraction)?,
        extractor,
    };
    if eval.is_splits == 0 {
        return Err(invalid("eval.is_splits", "must be at least 1"));
    }
    if !(eval.probe_test_fraction > 0.0 && eval.probe_test_fraction < 1.0) {
        return Err(invalid("eval.probe_test_fraction", "must be in (0, 1)"));
    }
    Ok(eval)
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn resolved_text_round_trips(
            mode in prop::sample::select(vec!["ugan", "cgan", "slcgan"]),
            k in 1usize..20,
            lr in 1e-6..1e-1f64,
            batch in 1usize..512,
            seed in any::<u64>(),
            width in 1usize..256,
            mi in 0.0..10.0f64,
            extractor in prop::sample::select(vec!["none", "identity", "random_projection"]),
        ) {
            let text = format!(
                "train.mode = {mode}\ntrain.k = {k}\ntrain.learning_rate = {lr}\ntrain.batch_size = {batch}\ntrain.seed = {seed}\n\
                 train.lambda_mi = {mi}\narch.width = {width}\neval.extractor = {extractor}\n"
            );
            let c = RunConfig::parse(&text).unwrap();
            let again = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&again, &c);
            prop_assert_eq!(again.to_text(), c.to_text());
        }
    }
}
