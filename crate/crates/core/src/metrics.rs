//! Sample-quality and clustering metrics.
//!
//! Fréchet distance and the Inception-style score are computed on the output
//! of a pluggable [`FeatureExtractor`]; absolute values are only comparable
//! between runs that use the same extractor.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::GaussianMixtureSpec;
use crate::graph::{as2, softmax_rows, Conv2dSpec, Graph};
use crate::models::{ClusteringNet, ModelError, Phase};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, MetricError> {
    Err(MetricError::Invalid(msg.into()))
}

/// Mean and unbiased covariance of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

/// Negative eigenvalues above this are treated as round-off and clipped.
pub const EIGEN_FLOOR: f64 = -1e-6;

pub fn gaussian_stats(features: &Array2<f64>) -> Result<GaussianStats, MetricError> {
    let (n, d) = features.dim();
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    if d == 0 {
        return invalid("features have zero dimensions");
    }
    let mean = features.mean_axis(Axis(0)).expect("nonempty");
    let centered = features - &mean;
    let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
    // Exact symmetry regardless of summation order.
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = m;
            cov[[j, i]] = m;
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Symmetric square root (and inverse square root when requested) by
/// eigendecomposition, clipping eigenvalues down to [`EIGEN_FLOOR`].
fn sym_sqrt(m: &DMatrix<f64>, inverse: bool) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>), MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < EIGEN_FLOOR) {
        return invalid(format!("matrix is not positive semidefinite (eigenvalue {bad})"));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let sqrt = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let inv = if inverse {
        if roots.iter().any(|&r| r <= 1e-12) {
            return invalid("matrix is singular");
        }
        Some(q * DMatrix::from_diagonal(&roots.map(|r| 1.0 / r)) * q.transpose())
    } else {
        None
    };
    Ok((sqrt, inv))
}

/// `Tr((A B)^(1/2))` through the symmetric form `Tr((A^(1/2) B A^(1/2))^(1/2))`.
pub fn trace_sqrt_product(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, MetricError> {
    let (ra, _) = sym_sqrt(&to_na(a), false)?;
    let m = &ra * to_na(b) * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// A square root `S` of the product `A B`, i.e. `S S = A B`, built as
/// `A^(1/2) (A^(1/2) B A^(1/2))^(1/2) A^(-1/2)`. Requires `A` nonsingular.
pub fn sqrtm_product(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, MetricError> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(MetricError::Dimension(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (ra, ra_inv) = sym_sqrt(&to_na(a), true)?;
    let inner = &ra * to_na(b) * &ra;
    let (inner_root, _) = sym_sqrt(&inner, false)?;
    Ok(from_na(&(&ra * inner_root * ra_inv.expect("requested"))))
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricError> {
    if a.mean.len() != b.mean.len() {
        return Err(MetricError::Dimension(format!("{} vs {}", a.mean.len(), b.mean.len())));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    let cross = trace_sqrt_product(&a.cov, &b.cov)?;
    let d = mean_term + a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * cross;
    if d < EIGEN_FLOOR {
        return invalid(format!("negative distance {d}"));
    }
    Ok(d.max(0.0))
}

fn validate_probs(p: &Array2<f64>) -> Result<(), MetricError> {
    for (i, row) in p.rows().into_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || v > 1.0 + 1e-9) || (row.sum() - 1.0).abs() > 1e-6 {
            return invalid(format!("row {i} is not a probability vector"));
        }
    }
    Ok(())
}

/// `exp(E_x KL(p(y|x) || p(y)))` per split; returns mean and population
/// standard deviation across splits. Trailing rows that do not fill a split
/// are dropped.
pub fn inception_style_score(probs: &Array2<f64>, splits: usize) -> Result<(f64, f64), MetricError> {
    let (n, k) = probs.dim();
    if n == 0 || k == 0 {
        return invalid("empty probability set");
    }
    if splits == 0 || splits > n {
        return invalid(format!("cannot split {n} vectors into {splits} parts"));
    }
    validate_probs(probs)?;
    let size = n / splits;
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = probs.slice(ndarray::s![s * size..(s + 1) * size, ..]);
            let marginal = part.mean_axis(Axis(0)).expect("nonempty split");
            let mut kl = 0.0;
            for row in part.rows() {
                for (&p, &m) in row.iter().zip(marginal.iter()) {
                    if p > 0.0 {
                        kl += p * (p.ln() - m.ln());
                    }
                }
            }
            (kl / size as f64).exp().clamp(1.0, k as f64)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Cluster-by-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    /// `counts[[cluster, class]]`.
    pub counts: Array2<usize>,
}

impl ContingencyTable {
    pub fn new(counts: Array2<usize>) -> Self {
        Self { counts }
    }

    pub fn from_assignments(clusters: &[usize], classes: &[usize], k: usize, j: usize) -> Result<Self, MetricError> {
        if clusters.len() != classes.len() {
            return Err(MetricError::Dimension(format!("{} assignments for {} labels", clusters.len(), classes.len())));
        }
        let mut counts = Array2::zeros((k, j));
        for (&c, &y) in clusters.iter().zip(classes) {
            if c >= k || y >= j {
                return invalid(format!("pair ({c}, {y}) outside a {k}x{j} table"));
            }
            counts[[c, y]] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.sum()
    }
}

/// Maximum-weight assignment of every row to a distinct column
/// (rows <= columns). Returns the column chosen for each row.
pub fn max_weight_assignment(w: &Array2<f64>) -> Vec<usize> {
    let (n, m) = w.dim();
    assert!(n <= m, "more rows than columns");
    // Shortest augmenting path formulation on costs -w, 1-indexed.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = -w[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Fraction of samples matched under the best injective cluster-to-class map.
pub fn clustering_accuracy(table: &ContingencyTable) -> Result<f64, MetricError> {
    let (k, j) = table.counts.dim();
    if k > j {
        return invalid(format!("{k} clusters cannot map injectively onto {j} classes"));
    }
    let n = table.total();
    if n == 0 {
        return invalid("empty table");
    }
    let w = table.counts.mapv(|c| c as f64);
    let cols = max_weight_assignment(&w);
    let matched: usize = cols.iter().enumerate().map(|(r, &c)| table.counts[[r, c]]).sum();
    Ok(matched as f64 / n as f64)
}

/// `(1/N) sum_k max_j |cluster_k ∩ class_j|`.
pub fn purity(table: &ContingencyTable) -> Result<f64, MetricError> {
    let n = table.total();
    if n == 0 {
        return invalid("empty table");
    }
    let best: usize = table.counts.rows().into_iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(best as f64 / n as f64)
}

/// Members per cluster id, zeros included.
pub fn cluster_histogram(assignments: &[usize], k: usize) -> Result<Vec<usize>, MetricError> {
    let mut counts = vec![0; k];
    for &a in assignments {
        if a >= k {
            return invalid(format!("assignment {a} outside [0, {k})"));
        }
        counts[a] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ndarray::ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from farthest-point seeding. The first center is drawn
/// from `rng`; each further center is the point farthest from the chosen
/// ones. Empty clusters keep their previous center.
pub fn kmeans<R: Rng + ?Sized>(features: &Array2<f64>, k: usize, rng: &mut R) -> Result<KMeans, MetricError> {
    let (n, d) = features.dim();
    if k == 0 || k > n {
        return invalid(format!("k = {k} for {n} points"));
    }
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&features.row(first));
    let mut closest: Vec<f64> = features.rows().into_iter().map(|x| sq_dist(x, features.row(first))).collect();
    for c in 1..k {
        let mut far = 0;
        for i in 1..n {
            if closest[i] > closest[far] {
                far = i;
            }
        }
        centers.row_mut(c).assign(&features.row(far));
        for (i, x) in features.rows().into_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(x, features.row(far)));
        }
    }
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (i, x) in features.rows().into_iter().enumerate() {
            let (c, _) = nearest(x, &centers);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed || iterations == KMEANS_MAX_ITER {
            break;
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, x) in features.rows().into_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &x);
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let inertia = features.rows().into_iter().zip(&assignments).map(|(x, &c)| sq_dist(x, centers.row(c))).sum();
    Ok(KMeans { assignments, centers, inertia, iterations })
}

pub const PROBE_EPOCHS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_DECAY_EPOCH: usize = 250;
pub const PROBE_DECAY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Softmax regression on frozen features, trained by full-batch gradient
/// descent on cross-entropy. No normalization or hidden layer is involved.
/// `test_fraction` of the shuffled samples is held out.
pub fn linear_probe<R: Rng + ?Sized>(
    features: &Array2<f64>,
    labels: &[usize],
    test_fraction: f64,
    rng: &mut R,
) -> Result<ProbeResult, MetricError> {
    let (n, d) = features.dim();
    if labels.len() != n {
        return Err(MetricError::Dimension(format!("{n} feature rows for {} labels", labels.len())));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return invalid(format!("test fraction {test_fraction} outside (0, 1)"));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return invalid("linear probe needs at least two classes");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return invalid(format!("split of {n} samples leaves an empty side"));
    }
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut present = vec![false; classes];
    for &i in train_idx {
        present[labels[i]] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return invalid(format!("class {missing} is absent from the training split"));
    }
    let x = features.select(Axis(0), train_idx);
    let mut y = Array2::<f64>::zeros((train_idx.len(), classes));
    for (r, &i) in train_idx.iter().enumerate() {
        y[[r, labels[i]]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let m = train_idx.len() as f64;
    for epoch in 0..PROBE_EPOCHS {
        let lr = if epoch < PROBE_DECAY_EPOCH { PROBE_LR } else { PROBE_LR * PROBE_DECAY };
        let p = softmax_rows(&(x.dot(&w) + &b));
        let err = (p - &y) / m;
        w.scaled_add(-lr, &x.t().dot(&err));
        b.scaled_add(-lr, &err.sum_axis(Axis(0)));
    }
    let accuracy = |idx: &[usize]| {
        let xs = features.select(Axis(0), idx);
        let logits = xs.dot(&w) + &b;
        let hits = logits
            .rows()
            .into_iter()
            .zip(idx)
            .filter(|(row, &i)| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best == labels[i]
            })
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult { train_accuracy: accuracy(train_idx), test_accuracy: accuracy(test_idx) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeCoverage {
    /// Modes holding at least 1% of the samples within three standard
    /// deviations of their center.
    pub covered: usize,
    /// Samples within three standard deviations of each center.
    pub per_mode: Vec<usize>,
    /// Purity of the (generation cluster id, nearest mode) table; `None`
    /// when no cluster ids were given.
    pub purity: Option<f64>,
}

pub const COVERAGE_RADIUS_SIGMAS: f64 = 3.0;
pub const COVERAGE_MIN_FRACTION: f64 = 0.01;

/// Mode coverage of generated 2-D points. `cluster_ids`, when non-empty,
/// holds the conditioning id each point was generated from.
pub fn mode_coverage(points: &Array2<f64>, cluster_ids: &[usize], spec: &GaussianMixtureSpec) -> Result<ModeCoverage, MetricError> {
    if points.ncols() != 2 {
        return Err(MetricError::Dimension(format!("expected 2-D points, got {}", points.ncols())));
    }
    let n = points.nrows();
    let radius = COVERAGE_RADIUS_SIGMAS * spec.sigma;
    let modes = spec.centers.len();
    let mut per_mode = vec![0; modes];
    let mut nearest_mode = Vec::with_capacity(n);
    for p in points.rows() {
        let mut best = (0, f64::INFINITY);
        for (m, c) in spec.centers.iter().enumerate() {
            let dist = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            if dist <= radius {
                per_mode[m] += 1;
            }
            if dist < best.1 {
                best = (m, dist);
            }
        }
        nearest_mode.push(best.0);
    }
    let threshold = COVERAGE_MIN_FRACTION * n as f64;
    let covered = per_mode.iter().filter(|&&c| n > 0 && c as f64 >= threshold).count();
    let purity = if cluster_ids.is_empty() || n == 0 {
        None
    } else {
        let k = cluster_ids.iter().copied().max().unwrap_or(0) + 1;
        let table = ContingencyTable::from_assignments(cluster_ids, &nearest_mode, k, modes)?;
        Some(purity(&table)?)
    };
    Ok(ModeCoverage { covered, per_mode, purity })
}

/// Deterministic map from samples to features and class probabilities.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn features(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError>;
    fn class_probs(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError>;
}

fn flatten(x: &ArrayD<f64>) -> Array2<f64> {
    let n = x.shape()[0];
    let d = x.len() / n.max(1);
    x.as_standard_layout().into_owned().into_shape_with_order((n, d)).expect("flatten")
}

/// Flattened samples as features; probabilities are their softmax.
pub struct IdentityExtractor {
    pub dim: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        let f = flatten(x);
        if f.ncols() != self.dim {
            return Err(MetricError::Dimension(format!("{} features, expected {}", f.ncols(), self.dim)));
        }
        Ok(f)
    }

    fn class_probs(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        Ok(softmax_rows(&self.features(x)?))
    }
}

/// Fixed-seed random network: two stride-2 ReLU convolutions with global
/// average pooling for images, or a random ReLU layer for points, followed
/// by a random linear map to `classes` logits.
pub struct RandomProjection {
    sample_shape: Vec<usize>,
    layers: Vec<ArrayD<f64>>,
    head: Array2<f64>,
}

impl RandomProjection {
    pub const CLASSES: usize = 10;

    pub fn new(sample_shape: &[usize], dim: usize, seed: u64) -> Result<Self, MetricError> {
        if dim == 0 {
            return invalid("projection dimension must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], fan_in: usize| {
            let s = (2.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| s * rng.sample::<f64, _>(StandardNormal))
        };
        let layers = match sample_shape {
            [d] => vec![normal(&[*d, dim], *d)],
            [c, _, _] => {
                let mid = dim.div_ceil(2);
                vec![normal(&[mid, *c, 3, 3], c * 9), normal(&[dim, mid, 3, 3], mid * 9)]
            }
            other => return invalid(format!("unsupported sample shape {other:?}")),
        };
        let head = as2(&normal(&[dim, Self::CLASSES], dim));
        Ok(Self { sample_shape: sample_shape.to_vec(), layers, head })
    }
}

impl FeatureExtractor for RandomProjection {
    fn feature_dim(&self) -> usize {
        self.head.nrows()
    }

    fn features(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        if x.shape().get(1..) != Some(self.sample_shape.as_slice()) {
            return Err(MetricError::Dimension(format!("samples {:?}, expected {:?}", &x.shape()[1..], self.sample_shape)));
        }
        if self.sample_shape.len() == 1 {
            return Ok(flatten(x).dot(&as2(&self.layers[0])).mapv(|v| v.max(0.0)));
        }
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for w in &self.layers {
            let wv = g.constant(w.clone());
            h = g.conv2d(h, wv, Conv2dSpec { stride: 2, padding: 1 });
            h = g.relu(h);
        }
        let pooled = g.mean_axes(h, &[2, 3]);
        let flat = g.reshape(pooled, &[x.shape()[0], self.feature_dim()]);
        Ok(as2(g.value(flat)))
    }

    fn class_probs(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        Ok(softmax_rows(&self.features(x)?.dot(&self.head)))
    }
}

/// A trained clustering or classification network used as extractor:
/// penultimate features and its softmax posteriors.
pub struct ClassifierExtractor {
    pub net: ClusteringNet,
}

impl FeatureExtractor for ClassifierExtractor {
    fn feature_dim(&self) -> usize {
        self.net.arch.penultimate_width()
    }

    fn features(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        Ok(self.net.penultimate_features(x, Phase::Eval)?)
    }

    fn class_probs(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, MetricError> {
        Ok(self.net.probs(x, Phase::Eval)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stats_examples() {
        let s = gaussian_stats(&array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, array![1.0, 0.0]);
        assert_eq!(s.cov, array![[2.0, 0.0], [0.0, 0.0]]);
        let c = gaussian_stats(&array![[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]]).unwrap();
        assert!(c.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&array![[1.0, 2.0]]).is_err());
    }

    fn stats(mean: Array1<f64>, cov: Array2<f64>) -> GaussianStats {
        GaussianStats { mean, cov, n: 10 }
    }

    #[test]
    fn frechet_examples() {
        let eye = Array2::<f64>::eye(2);
        let a = stats(array![0.0, 0.0], eye.clone());
        let b = stats(array![1.0, 0.0], eye.clone());
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let c = stats(array![0.0, 0.0], eye.clone() * 4.0);
        assert!((frechet_distance(&c, &a).unwrap() - 2.0).abs() < 1e-12);
        let d3 = stats(array![0.0, 0.0, 0.0], Array2::eye(3));
        assert!(matches!(frechet_distance(&a, &d3), Err(MetricError::Dimension(_))));
    }

    #[test]
    fn sqrtm_product_squares_back() {
        let a = array![[2.0, 0.5], [0.5, 1.0]];
        let b = array![[1.0, -0.3], [-0.3, 3.0]];
        let s = sqrtm_product(&a, &b).unwrap();
        let err = (s.dot(&s) - a.dot(&b)).mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-10);
    }

    #[test]
    fn inception_examples() {
        let uniform = Array2::from_elem((6, 3), 1.0 / 3.0);
        assert!((inception_style_score(&uniform, 1).unwrap().0 - 1.0).abs() < 1e-12);
        let onehot = Array2::from_shape_fn((6, 3), |(i, j)| if i % 3 == j { 1.0 } else { 0.0 });
        assert!((inception_style_score(&onehot, 1).unwrap().0 - 3.0).abs() < 1e-12);
        let same = Array2::from_shape_fn((6, 3), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        assert!((inception_style_score(&same, 2).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(inception_style_score(&Array2::zeros((0, 3)), 1).is_err());
        assert!(inception_style_score(&uniform, 0).is_err());
    }

    #[test]
    fn accuracy_and_purity_examples() {
        let t = ContingencyTable::new(array![[2, 0, 0], [0, 1, 1], [1, 0, 1]]);
        assert!((clustering_accuracy(&t).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let one = ContingencyTable::new(array![[60, 40]]);
        assert_eq!(purity(&one).unwrap(), 0.6);
        let wide = ContingencyTable::new(array![[0, 5, 1], [3, 0, 0]]);
        assert_eq!(clustering_accuracy(&wide).unwrap(), 8.0 / 9.0);
        let tall = ContingencyTable::new(array![[1], [2]]);
        assert!(clustering_accuracy(&tall).is_err());
    }

    #[test]
    fn histogram_examples() {
        let rr: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(cluster_histogram(&rr, 4).unwrap(), vec![25; 4]);
        assert_eq!(cluster_histogram(&[0; 7], 3).unwrap(), vec![7, 0, 0]);
        assert!(cluster_histogram(&[3], 3).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pts = Array2::zeros((200, 2));
        for i in 0..200 {
            let cx = if i < 100 { 0.0 } else { 100.0 };
            pts[[i, 0]] = cx + rng.sample::<f64, _>(StandardNormal);
            pts[[i, 1]] = rng.sample::<f64, _>(StandardNormal);
        }
        let km = kmeans(&pts, 2, &mut rng).unwrap();
        let a = km.assignments[0];
        assert!(km.assignments[..100].iter().all(|&c| c == a));
        assert!(km.assignments[100..].iter().all(|&c| c != a));

        let small = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let all = kmeans(&small, 3, &mut rng).unwrap();
        assert_eq!(all.inertia, 0.0);
        let mut sorted = all.assignments.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(kmeans(&small, 4, &mut rng).is_err());
        let dup = array![[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]];
        let one = kmeans(&dup, 1, &mut rng).unwrap();
        assert_eq!(one.assignments[0], one.assignments[1]);
    }

    #[test]
    fn probe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400;
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0; n];
        for i in 0..n {
            y[i] = i % 2;
            let c = if y[i] == 0 { -3.0 } else { 3.0 };
            x[[i, 0]] = c + 0.5 * rng.sample::<f64, _>(StandardNormal);
            x[[i, 1]] = rng.sample::<f64, _>(StandardNormal);
        }
        let r = linear_probe(&x, &y, 0.25, &mut rng).unwrap();
        assert!(r.test_accuracy >= 0.99, "{r:?}");
        assert!(linear_probe(&x, &vec![0; n], 0.25, &mut rng).is_err());
    }

    #[test]
    fn coverage_examples() {
        let spec = GaussianMixtureSpec::ring(8, 1.0, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pts, labels) = crate::data::gmm_sample(&spec, 2000, &mut rng);
        let cov = mode_coverage(&pts, &labels, &spec).unwrap();
        assert_eq!(cov.covered, 8);
        assert_eq!(cov.purity, Some(1.0));
        let collapsed = Array2::from_shape_fn((100, 2), |(_, j)| spec.centers[3][j]);
        let cov = mode_coverage(&collapsed, &[], &spec).unwrap();
        assert_eq!(cov.covered, 1);
        assert_eq!(cov.per_mode[3], 100);
        assert_eq!(cov.purity, None);
    }

    #[test]
    fn extractors_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 3, 8, 8]), |_| rng.random_range(-1.0..1.0));
        let a = RandomProjection::new(&[3, 8, 8], 16, 7).unwrap();
        let b = RandomProjection::new(&[3, 8, 8], 16, 7).unwrap();
        let fa = a.features(&x).unwrap();
        assert_eq!(fa.dim(), (4, 16));
        assert_eq!(fa, b.features(&x).unwrap());
        let p = a.class_probs(&x).unwrap();
        assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        let id = IdentityExtractor { dim: 192 };
        assert_eq!(id.features(&x).unwrap().ncols(), 192);
        assert!(a.features(&ArrayD::zeros(IxDyn(&[2, 3, 4, 4]))).is_err());
    }
}
