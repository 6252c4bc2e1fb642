//! Generator, discriminator and clustering network.
//!
//! Two architecture families share the same conditioning machinery:
//!
//! * `mlp`: dense networks over low-dimensional points, used for the
//!   Gaussian-mixture benchmark and for gradient checks on tiny networks.
//! * `conv`: BigGAN-style residual generator and discriminator (one block per
//!   stage) with a small convolutional or ResNet18 clustering backbone.
//!
//! The label enters the generator through a linear embedding that drives
//! class-conditional batch normalization, and enters the discriminator through
//! a projection: `joint = unary + <embed(y), phi(x)>`. The unary score only
//! ever sees the image.

mod clustering;
mod discriminator;
mod generator;
pub mod nn;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::graph::Tensor;

pub use clustering::ClusteringNet;
pub use discriminator::{Discriminator, ScorePair, Scores};
pub use generator::Generator;
pub use nn::{spectral_normalize, Phase, SpectralState};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Mlp,
    Conv,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Mlp => "mlp",
            Family::Conv => "conv",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// Dense layers; the only option for the `mlp` family.
    Mlp,
    /// Four conv stages with a configurable penultimate width.
    Small,
    /// ResNet18 with a 512-wide penultimate layer.
    ResNet18,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Mlp => "mlp",
            Backbone::Small => "small",
            Backbone::ResNet18 => "resnet18",
        })
    }
}

/// Architecture metadata shared by G, D and C.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub family: Family,
    pub d_z: usize,
    pub k: usize,
    /// `[dim]` for points, `[channels, height, width]` for images.
    pub data_shape: Vec<usize>,
    /// Hidden width (mlp) or channel multiplier (conv) for G and D.
    pub width: usize,
    /// Hidden layers per network in the mlp family.
    pub depth: usize,
    pub embed_dim: usize,
    pub backbone: Backbone,
    /// Penultimate width of the clustering network.
    pub c_width: usize,
    pub sn_g: bool,
    pub sn_d: bool,
    pub sn_c: bool,
    /// False in unconditional training: no embeddings are built at all.
    pub conditional: bool,
    /// Scale applied after the generator's tanh for point data.
    pub point_scale: f64,
}

impl ArchConfig {
    pub fn mlp(k: usize) -> Self {
        Self {
            family: Family::Mlp,
            d_z: 8,
            k,
            data_shape: vec![2],
            width: 64,
            depth: 2,
            embed_dim: 16,
            backbone: Backbone::Mlp,
            c_width: 64,
            sn_g: true,
            sn_d: true,
            sn_c: false,
            conditional: true,
            point_scale: 1.5,
        }
    }

    pub fn conv(k: usize, channels: usize, resolution: usize) -> Self {
        Self {
            family: Family::Conv,
            d_z: 128,
            k,
            data_shape: vec![channels, resolution, resolution],
            width: 32,
            depth: 1,
            embed_dim: 128,
            backbone: Backbone::Small,
            c_width: 128,
            sn_g: true,
            sn_d: true,
            sn_c: false,
            conditional: true,
            point_scale: 1.0,
        }
    }

    /// Number of 2x resolution stages for the conv family (4x4 base).
    pub fn stages(&self) -> usize {
        match self.family {
            Family::Mlp => 0,
            Family::Conv => {
                let mut s = 0;
                let mut r = 4;
                while r < self.data_shape[1] {
                    r *= 2;
                    s += 1;
                }
                s
            }
        }
    }

    pub fn penultimate_width(&self) -> usize {
        match self.backbone {
            Backbone::ResNet18 => 512,
            _ => self.c_width,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_z == 0 {
            return bad("d_z must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.width == 0 || self.c_width == 0 || self.embed_dim == 0 {
            return bad("widths must be positive".into());
        }
        match self.family {
            Family::Mlp => {
                if self.data_shape.len() != 1 || self.data_shape[0] == 0 {
                    return bad(format!("mlp family expects a point shape [dim], got {:?}", self.data_shape));
                }
                if self.backbone != Backbone::Mlp {
                    return bad(format!("mlp family requires the mlp backbone, got {}", self.backbone));
                }
                if self.depth == 0 {
                    return bad("depth must be positive".into());
                }
            }
            Family::Conv => {
                if self.data_shape.len() != 3 {
                    return bad(format!("conv family expects [channels, height, width], got {:?}", self.data_shape));
                }
                let (h, w) = (self.data_shape[1], self.data_shape[2]);
                if h != w || h < 8 || !h.is_power_of_two() {
                    return bad(format!("conv family needs square power-of-two images of side >= 8, got {h}x{w}"));
                }
                if self.backbone == Backbone::Mlp {
                    return bad("conv family cannot use the mlp backbone".into());
                }
            }
        }
        Ok(())
    }

    /// Stable textual form, hashed into checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "family={};d_z={};k={};shape={:?};width={};depth={};embed={};backbone={};c_width={};sn=({},{},{});cond={};scale={}",
            self.family,
            self.d_z,
            self.k,
            self.data_shape,
            self.width,
            self.depth,
            self.embed_dim,
            self.backbone,
            self.c_width,
            self.sn_g,
            self.sn_d,
            self.sn_c,
            self.conditional,
            self.point_scale
        )
    }
}

/// Parameter tensors and running buffers of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams {
    pub params: BTreeMap<String, Tensor>,
    /// Power-iteration vectors and batch-norm running statistics.
    pub buffers: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Latent batch `(batch, d_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Array2<f64>);

impl LatentCode {
    pub fn batch(&self) -> usize {
        self.0.nrows()
    }
}

/// Cluster ids together with their one-hot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningCode {
    pub index: Vec<usize>,
    pub onehot: Array2<f64>,
}

impl ConditioningCode {
    pub fn from_indices(index: Vec<usize>, k: usize) -> Result<Self, ModelError> {
        let mut onehot = Array2::zeros((index.len(), k));
        for (row, &c) in index.iter().enumerate() {
            if c >= k {
                return Err(ModelError::Config(format!("cluster id {c} out of range for k={k}")));
            }
            onehot[[row, c]] = 1.0;
        }
        Ok(Self { index, onehot })
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        let index = (0..n).map(|_| rng.random_range(0..k)).collect();
        Self::from_indices(index, k).expect("sampled ids are in range")
    }

    pub fn k(&self) -> usize {
        self.onehot.ncols()
    }
}

/// Row-stochastic cluster posteriors `(batch, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterProbs(pub Array2<f64>);

impl ClusterProbs {
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn max(&self) -> Array1<f64> {
        self.0.map_axis(ndarray::Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
    }
}
