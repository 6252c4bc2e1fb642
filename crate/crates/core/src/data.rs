//! Priors, augmentations, the Gaussian-mixture benchmark and dataset
//! ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::models::{ConditioningCode, LatentCode};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("{path}: image is {found:?}, expected {expected:?}")]
    InconsistentSize { path: PathBuf, found: (u32, u32), expected: (u32, u32) },
    #[error("crop window of {0}x{1} pixels is degenerate")]
    DegenerateCrop(usize, usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// `n` rows of i.i.d. standard normal entries.
pub fn sample_latent<R: Rng + ?Sized>(n: usize, d_z: usize, rng: &mut R) -> LatentCode {
    LatentCode(Array2::from_shape_fn((n, d_z), |_| rng.sample(StandardNormal)))
}

/// Cluster ids drawn uniformly from `[0, k)`.
pub fn sample_condition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> ConditioningCode {
    ConditioningCode::sample(n, k, rng)
}

/// Random views used by the multi-view clustering loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    /// Fraction of the image area kept by the crop, sampled uniformly.
    pub crop_scale: (f64, f64),
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub hflip_prob: f64,
    /// Standard deviation of the additive noise used for point data.
    pub point_noise: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { crop_scale: (0.8, 1.0), jitter: 0.4, hflip_prob: 0.5, point_noise: 0.05 }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), jitter: 0.0, hflip_prob: 0.0, point_noise: 0.0 }
    }

    /// Default policy without flips, for datasets whose classes are not
    /// mirror-symmetric (digits, characters).
    pub fn digits() -> Self {
        Self { hflip_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DataError::Invalid(format!("crop scale ({lo}, {hi}) must satisfy 0 < low <= high <= 1")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(DataError::Invalid(format!("flip probability {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(DataError::Invalid(format!("jitter {} must be in [0, 1)", self.jitter)));
        }
        if !(self.point_noise >= 0.0) {
            return Err(DataError::Invalid("point noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Applies a random view of `policy` to every sample.
///
/// Image batches `(n, c, h, w)` are cropped (fixed aspect ratio, resized
/// back bilinearly), color jittered and flipped, then clipped to `[-1, 1]`.
/// Point batches `(n, d)` receive additive Gaussian noise.
pub fn augment<R: Rng + ?Sized>(x: &ArrayD<f64>, policy: &AugmentationPolicy, rng: &mut R) -> Result<ArrayD<f64>, DataError> {
    policy.validate()?;
    match x.ndim() {
        2 => {
            let mut out = x.clone();
            if policy.point_noise > 0.0 {
                for v in out.iter_mut() {
                    *v += policy.point_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Ok(out)
        }
        4 => {
            let mut out = x.clone();
            for i in 0..x.shape()[0] {
                let img = x.index_axis(Axis(0), i).to_owned();
                let view = augment_image(img, policy, rng)?;
                out.index_axis_mut(Axis(0), i).assign(&view);
            }
            Ok(out)
        }
        d => Err(DataError::Invalid(format!("cannot augment a rank-{d} batch"))),
    }
}

fn augment_image<R: Rng + ?Sized>(img: ArrayD<f64>, policy: &AugmentationPolicy, rng: &mut R) -> Result<ArrayD<f64>, DataError> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (lo, hi) = policy.crop_scale;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let ch = (side * h as f64).round() as usize;
    let cw = (side * w as f64).round() as usize;
    if ch < 1 || cw < 1 {
        return Err(DataError::DegenerateCrop(ch, cw));
    }
    let mut out = if ch == h && cw == w {
        img
    } else {
        let oy = rng.random_range(0..=h - ch);
        let ox = rng.random_range(0..=w - cw);
        let crop = img.slice(s![.., oy..oy + ch, ox..ox + cw]).to_owned().into_dyn();
        resize_bilinear(&crop, h, w)
    };
    if policy.jitter > 0.0 {
        let j = policy.jitter;
        let b = rng.random_range(1.0 - j..=1.0 + j);
        let ct = rng.random_range(1.0 - j..=1.0 + j);
        let sat = rng.random_range(1.0 - j..=1.0 + j);
        color_jitter(&mut out, b, ct, sat);
    }
    if policy.hflip_prob > 0.0 && rng.random::<f64>() < policy.hflip_prob {
        out = flip_horizontal(&out);
    }
    out.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    debug_assert_eq!(out.shape(), &[c, h, w]);
    Ok(out)
}

/// Mirrors a `(c, h, w)` image along the width axis.
pub fn flip_horizontal(img: &ArrayD<f64>) -> ArrayD<f64> {
    img.slice(s![.., .., ..;-1]).to_owned().into_dyn()
}

fn resize_bilinear(img: &ArrayD<f64>, h: usize, w: usize) -> ArrayD<f64> {
    let (c, sh, sw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    let ry = sh as f64 / h as f64;
    let rx = sw as f64 / w as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - tx) + img[[ch, y0, x1]] * tx;
                let bot = img[[ch, y1, x0]] * (1.0 - tx) + img[[ch, y1, x1]] * tx;
                out[[ch, y, x]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn color_jitter(img: &mut ArrayD<f64>, brightness: f64, contrast: f64, saturation: f64) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    img.mapv_inplace(|v| ((v + 1.0) * 0.5 * brightness).clamp(0.0, 1.0));
    let gray = |img: &ArrayD<f64>, y: usize, x: usize| {
        if c == 3 {
            0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
        } else {
            (0..c).map(|ch| img[[ch, y, x]]).sum::<f64>() / c as f64
        }
    };
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += gray(img, y, x);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    if c == 3 {
        for y in 0..h {
            for x in 0..w {
                let g = gray(img, y, x);
                for ch in 0..3 {
                    img[[ch, y, x]] = (g + (img[[ch, y, x]] - g) * saturation).clamp(0.0, 1.0);
                }
            }
        }
    }
    img.mapv_inplace(|v| v * 2.0 - 1.0);
}

/// Isotropic Gaussian mixture in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureSpec {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl GaussianMixtureSpec {
    /// `modes` equally weighted components evenly spaced on a circle.
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Self {
        let centers = (0..modes)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / modes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { centers, sigma, weights: vec![1.0 / modes as f64; modes] }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.centers.len() < 2 && self.weights.len() < 2 {
            // A single component is allowed for sanity checks.
        }
        if self.centers.is_empty() {
            return Err(DataError::Invalid("mixture needs at least one center".into()));
        }
        if self.weights.len() != self.centers.len() {
            return Err(DataError::Invalid(format!("{} weights for {} centers", self.weights.len(), self.centers.len())));
        }
        if !(self.sigma > 0.0) {
            return Err(DataError::Invalid("sigma must be positive".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(DataError::Invalid("weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Draws `n` points and the component each came from.
pub fn gmm_sample<R: Rng + ?Sized>(spec: &GaussianMixtureSpec, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = spec.weights.len() - 1;
        for (j, &w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = j;
                break;
            }
        }
        // Zero-weight components are never selected, even at u == acc.
        while spec.weights[comp] == 0.0 && comp > 0 {
            comp -= 1;
        }
        let c = spec.centers[comp];
        points[[i, 0]] = c[0] + spec.sigma * rng.sample::<f64, _>(StandardNormal);
        points[[i, 1]] = c[1] + spec.sigma * rng.sample::<f64, _>(StandardNormal);
        labels.push(comp);
    }
    (points, labels)
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// `n` points drawn from the mixture with a fixed seed.
    Gmm { spec: GaussianMixtureSpec, n: usize, seed: u64 },
    /// One subdirectory per class, or a flat directory of unlabeled images.
    ImageDir { path: PathBuf, channels: usize },
    /// MNIST IDX files, padded from 28x28 to 32x32.
    Mnist { root: PathBuf, limit: usize },
}

/// A fully materialized dataset.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub source: Source,
    /// `(n, d)` points or `(n, c, h, w)` images in `[-1, 1]`.
    pub data: ArrayD<f64>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
}

/// One batch of real data.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: ArrayD<f64>,
    pub labels: Option<Vec<usize>>,
}

impl DatasetHandle {
    pub fn open(source: Source) -> Result<Self, DataError> {
        match &source {
            Source::Gmm { spec, n, seed } => {
                spec.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let (points, labels) = gmm_sample(spec, *n, &mut rng);
                let names = (0..spec.centers.len()).map(|i| format!("mode{i}")).collect();
                Ok(Self { data: points.into_dyn(), labels: Some(labels), class_names: names, source })
            }
            Source::ImageDir { path, channels } => {
                let (data, labels, names) = load_image_dir(path, *channels)?;
                Ok(Self { data, labels, class_names: names, source })
            }
            Source::Mnist { root, limit } => {
                let (data, labels) = load_mnist(root, *limit)?;
                let names = (0..10).map(|d| d.to_string()).collect();
                Ok(Self { data, labels: Some(labels), class_names: names, source })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|_| self.class_names.len())
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let x = self.data.select(Axis(0), indices);
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Batch { x, labels }
    }

    /// One shuffled epoch; the final partial batch is dropped.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> impl Iterator<Item = Batch> + '_ {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let count = if batch_size == 0 { 0 } else { self.len() / batch_size };
        (0..count).map(move |b| self.gather(&order[b * batch_size..(b + 1) * batch_size]))
    }
}

/// Endless batch stream whose order depends only on `(seed, epoch)`, so the
/// position can be checkpointed as three integers.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    /// Permutation of the current epoch, rebuilt lazily.
    order: Vec<usize>,
}

impl PartialEq for EpochSampler {
    fn eq(&self, other: &Self) -> bool {
        (self.seed, self.epoch, self.cursor) == (other.seed, other.epoch, other.cursor)
    }
}

impl EpochSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        Self { seed, epoch: 0, cursor: 0, order: Self::order(seed, 0, n) }
    }

    pub fn restore(seed: u64, epoch: u64, cursor: usize) -> Self {
        Self { seed, epoch, cursor, order: Vec::new() }
    }

    fn order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn next_batch(&mut self, data: &DatasetHandle, batch_size: usize) -> Batch {
        assert!(batch_size > 0 && batch_size <= data.len(), "batch size {batch_size} for {} samples", data.len());
        if self.order.len() != data.len() {
            self.order = Self::order(self.seed, self.epoch, data.len());
        }
        if self.cursor + batch_size > self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = Self::order(self.seed, self.epoch, data.len());
        }
        let idx = &self.order[self.cursor..self.cursor + batch_size];
        self.cursor += batch_size;
        data.gather(idx)
    }
}

fn unreadable(path: &Path, e: impl ToString) -> DataError {
    DataError::Unreadable { path: path.to_path_buf(), reason: e.to_string() }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| unreadable(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| unreadable(dir, err)))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

/// Decodes one image to `(channels, h, w)` in `[-1, 1]`.
pub fn decode_image(path: &Path, channels: usize) -> Result<ArrayD<f64>, DataError> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(DataError::Invalid(format!("unsupported channel count {c}"))),
    };
    let mut out = ArrayD::zeros(IxDyn(&[channels, h, w]));
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = raw[(y * w + x) * channels + c] as f64 / 255.0;
                out[[c, y, x]] = v * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

type Loaded = (ArrayD<f64>, Option<Vec<usize>>, Vec<String>);

fn load_image_dir(root: &Path, channels: usize) -> Result<Loaded, DataError> {
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files: Vec<(PathBuf, Option<usize>)> = Vec::new();
    let mut names = Vec::new();
    if class_dirs.is_empty() {
        files.extend(entries.iter().filter(|p| is_image(p)).map(|p| (p.clone(), None)));
    } else {
        for (label, dir) in class_dirs.iter().enumerate() {
            names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            for f in sorted_entries(dir)? {
                if is_image(&f) {
                    files.push((f, Some(label)));
                }
            }
        }
    }
    if files.is_empty() {
        return Err(unreadable(root, "no images found"));
    }
    let mut expected: Option<(u32, u32)> = None;
    let mut images = Vec::with_capacity(files.len());
    for (path, _) in &files {
        let img = decode_image(path, channels)?;
        let dims = (img.shape()[2] as u32, img.shape()[1] as u32);
        match expected {
            None => expected = Some(dims),
            Some(e) if e != dims => {
                return Err(DataError::InconsistentSize { path: path.clone(), found: dims, expected: e });
            }
            _ => {}
        }
        images.push(img);
    }
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    let data = ndarray::stack(Axis(0), &views).map_err(|e| unreadable(root, e))?;
    let labels = if class_dirs.is_empty() { None } else { Some(files.iter().map(|(_, l)| l.unwrap_or(0)).collect()) };
    Ok((data, labels, names))
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
    if bytes.len() < 8 {
        return Err(unreadable(path, "truncated IDX header"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != expected_magic {
        return Err(unreadable(path, format!("bad IDX magic {magic:#x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(unreadable(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]]) as usize)
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() < header + total {
        return Err(unreadable(path, "truncated IDX payload"));
    }
    Ok((dims, bytes[header..header + total].to_vec()))
}

fn load_mnist(root: &Path, limit: usize) -> Result<(ArrayD<f64>, Vec<usize>), DataError> {
    let (idims, pixels) = read_idx(&root.join("train-images-idx3-ubyte"), 0x0803)?;
    let (ldims, labels) = read_idx(&root.join("train-labels-idx1-ubyte"), 0x0801)?;
    if idims[0] != ldims[0] {
        return Err(unreadable(root, "image and label counts differ"));
    }
    let n = idims[0].min(if limit == 0 { usize::MAX } else { limit });
    let (h, w) = (idims[1], idims[2]);
    let mut data = ArrayD::from_elem(IxDyn(&[n, 1, 32, 32]), -1.0);
    let (oy, ox) = ((32 - h.min(32)) / 2, (32 - w.min(32)) / 2);
    for i in 0..n {
        for y in 0..h.min(32) {
            for x in 0..w.min(32) {
                data[[i, 0, oy + y, ox + x]] = pixels[i * h * w + y * w + x] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok((data, labels[..n].iter().map(|&l| l as usize).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn latent_moments() {
        let z = sample_latent(100_000, 4, &mut rng(0));
        for col in z.0.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
        assert_eq!(sample_latent(1, 1, &mut rng(1)).0.dim(), (1, 1));
        assert_eq!(sample_latent(3, 2, &mut rng(5)), sample_latent(3, 2, &mut rng(5)));
    }

    #[test]
    fn condition_frequencies() {
        let c = sample_condition(100_000, 10, &mut rng(1));
        let mut counts = [0usize; 10];
        for &i in &c.index {
            counts[i] += 1;
        }
        for &n in &counts {
            assert!((n as f64 / 1e5 - 0.1).abs() < 0.01);
        }
        for (row, &i) in c.onehot.rows().into_iter().zip(&c.index) {
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row[i], 1.0);
        }
        let one = sample_condition(50, 1, &mut rng(2));
        assert!(one.index.iter().all(|&i| i == 0));
    }

    fn random_images(n: usize, c: usize, side: usize, seed: u64) -> ArrayD<f64> {
        let mut r = rng(seed);
        ArrayD::from_shape_fn(IxDyn(&[n, c, side, side]), |_| r.random_range(-1.0..=1.0))
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = random_images(3, 3, 8, 0);
        let y = augment(&x, &AugmentationPolicy::identity(), &mut rng(1)).unwrap();
        assert_eq!(x, y);
        let p = ArrayD::from_shape_fn(IxDyn(&[5, 2]), |i| i[0] as f64 - i[1] as f64);
        assert_eq!(augment(&p, &AugmentationPolicy::identity(), &mut rng(2)).unwrap(), p);
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let x = random_images(2, 3, 6, 3);
        let policy = AugmentationPolicy { hflip_prob: 1.0, ..AugmentationPolicy::identity() };
        let y = augment(&x, &policy, &mut rng(4)).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for r in 0..6 {
                    for col in 0..6 {
                        assert_eq!(y[[n, c, r, col]], x[[n, c, r, 5 - col]]);
                    }
                }
            }
        }
    }

    #[test]
    fn default_policy_is_stochastic_and_in_range() {
        let x = random_images(4, 3, 16, 5);
        let a = augment(&x, &AugmentationPolicy::default(), &mut rng(6)).unwrap();
        let b = augment(&x, &AugmentationPolicy::default(), &mut rng(7)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let again = augment(&x, &AugmentationPolicy::default(), &mut rng(6)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn tiny_crop_is_an_error() {
        let x = random_images(1, 1, 2, 8);
        let policy = AugmentationPolicy { crop_scale: (0.01, 0.01), ..AugmentationPolicy::identity() };
        assert!(matches!(augment(&x, &policy, &mut rng(9)), Err(DataError::DegenerateCrop(..))));
    }

    #[test]
    fn gmm_single_center_mean() {
        let spec = GaussianMixtureSpec { centers: vec![[0.0, 0.0]], sigma: 0.1, weights: vec![1.0] };
        let (p, _) = gmm_sample(&spec, 10_000, &mut rng(10));
        let m = p.mean_axis(Axis(0)).unwrap();
        assert!(m[0].abs() < 0.01 && m[1].abs() < 0.01);
    }

    #[test]
    fn gmm_ring_component_counts() {
        let spec = GaussianMixtureSpec::ring(8, 1.0, 0.05);
        let (_, labels) = gmm_sample(&spec, 8000, &mut rng(11));
        let mut counts = [0usize; 8];
        for l in labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| (800..=1200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn gmm_degenerate_weights() {
        let spec = GaussianMixtureSpec { centers: vec![[0.0, 0.0], [5.0, 5.0]], sigma: 0.1, weights: vec![1.0, 0.0] };
        let (_, labels) = gmm_sample(&spec, 1000, &mut rng(12));
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_epochs() {
        let spec = GaussianMixtureSpec::ring(4, 1.0, 0.05);
        let ds = DatasetHandle::open(Source::Gmm { spec, n: 1024, seed: 3 }).unwrap();
        assert_eq!(ds.batches(256, &mut rng(1)).count(), 4);
        assert_eq!(ds.batches(300, &mut rng(1)).count(), 3);
        let a: Vec<_> = ds.batches(256, &mut rng(2)).collect();
        let b: Vec<_> = ds.batches(256, &mut rng(2)).collect();
        assert_eq!(a, b);
        assert_eq!(a[0].x.shape(), &[256, 2]);
    }

    #[test]
    fn epoch_sampler_resumes() {
        let spec = GaussianMixtureSpec::ring(4, 1.0, 0.05);
        let ds = DatasetHandle::open(Source::Gmm { spec, n: 100, seed: 3 }).unwrap();
        let mut a = EpochSampler::new(9, ds.len());
        for _ in 0..7 {
            a.next_batch(&ds, 32);
        }
        let mut b = EpochSampler::restore(9, a.epoch, a.cursor);
        for _ in 0..5 {
            assert_eq!(a.next_batch(&ds, 32), b.next_batch(&ds, 32));
        }
    }

    #[test]
    fn missing_directory_names_path() {
        let err = DatasetHandle::open(Source::ImageDir { path: "/nonexistent/slcgan".into(), channels: 3 }).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/slcgan"));
    }
}

#[cfg(test)]
mod props {
    use ndarray::{Array4, ArrayD};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn policy() -> impl Strategy<Value = AugmentationPolicy> {
        (0.1..1.0f64, 0.0..1.0f64, 0.0..0.9f64, 0.0..1.0f64, 0.0..0.5f64).prop_map(|(lo, span, jitter, hflip, noise)| AugmentationPolicy {
            crop_scale: (lo, (lo + span).min(1.0)),
            jitter,
            hflip_prob: hflip,
            point_noise: noise,
        })
    }

    proptest! {
        #[test]
        fn augment_preserves_shape_and_range(p in policy(), seed in any::<u64>(), c in 1usize..4, hw in 4usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: ArrayD<f64> = Array4::from_shape_fn((2, c, hw, hw), |(n, ch, y, xx)| (((n + ch * 3 + y * 5 + xx * 7) % 17) as f64 / 8.0) - 1.0).into_dyn();
            let out = augment(&x, &p, &mut rng).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
            prop_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn point_augmentation_keeps_shape(p in policy(), seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::<f64>::zeros((n, 2)).into_dyn();
            let out = augment(&x, &p, &mut rng).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
        }

        #[test]
        fn sampling_is_reproducible(seed in any::<u64>()) {
            let spec = GaussianMixtureSpec::ring(8, 1.0, 0.05);
            let draw = |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (sample_latent(4, 3, &mut rng).0, sample_condition(4, 5, &mut rng).index, gmm_sample(&spec, 16, &mut rng))
            };
            prop_assert_eq!(draw(seed), draw(seed));
            prop_assert_ne!(draw(seed).0, draw(seed.wrapping_add(1)).0);
        }

        #[test]
        fn gmm_points_lie_near_their_centers(seed in any::<u64>(), modes in 1usize..12, sigma in 0.01..0.5f64) {
            let spec = GaussianMixtureSpec::ring(modes, 1.0, sigma);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, labels) = gmm_sample(&spec, 50, &mut rng);
            for (row, &l) in x.rows().into_iter().zip(&labels) {
                let c = spec.centers[l];
                prop_assert!((row[0] - c[0]).abs() <= 6.0 * sigma && (row[1] - c[1]).abs() <= 6.0 * sigma);
            }
        }
    }
}
