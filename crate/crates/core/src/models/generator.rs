use ndarray::{Array2, ArrayD};
use rand::Rng;

use super::nn::{Builder, Init, Pass, Phase};
use super::{ArchConfig, Family, LatentCode, ModelError, NetworkParams};
use crate::graph::{Graph, Var};
use crate::instrument;

/// Generator `G(z, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: ArchConfig,
    pub net: NetworkParams,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let sn = arch.sn_g;
        let mut b = Builder::new(Init::Orthogonal, rng);
        if arch.conditional {
            b.linear("embed", arch.k, arch.embed_dim, false, false);
        }
        let norm = |b: &mut Builder<'_, R>, name: &str, ch: usize| {
            if arch.conditional {
                b.cond_batch_norm(name, ch, arch.embed_dim, sn);
            } else {
                b.batch_norm(name, ch);
            }
        };
        match arch.family {
            Family::Mlp => {
                let mut input = arch.d_z;
                for l in 0..arch.depth {
                    b.linear(&format!("fc{l}"), input, arch.width, sn, true);
                    norm(&mut b, &format!("bn{l}"), arch.width);
                    input = arch.width;
                }
                b.linear("out", input, arch.data_shape[0], sn, true);
            }
            Family::Conv => {
                let ch = arch.width;
                b.linear("fc", arch.d_z, ch * 16, sn, true);
                for s in 0..arch.stages() {
                    let p = format!("block{s}");
                    norm(&mut b, &format!("{p}.bn1"), ch);
                    b.conv(&format!("{p}.conv1"), ch, ch, 3, sn);
                    norm(&mut b, &format!("{p}.bn2"), ch);
                    b.conv(&format!("{p}.conv2"), ch, ch, 3, sn);
                    b.conv(&format!("{p}.sc"), ch, ch, 1, sn);
                }
                b.batch_norm("out_bn", ch);
                b.conv("out_conv", ch, arch.data_shape[0], 3, sn);
            }
        }
        Ok(Self { arch: arch.clone(), net: b.net })
    }

    /// Output shape for a batch of `n`.
    pub fn output_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.arch.data_shape);
        s
    }

    /// Records the forward pass. `cond` is a (batch, k) one-hot or soft
    /// label; it is ignored by unconditional generators.
    pub fn forward(&self, pass: &mut Pass<'_>, z: Var, cond: Option<Var>) -> Var {
        let arch = &self.arch;
        let sn = arch.sn_g;
        let n = pass.g.shape(z)[0];
        let embedding = match (arch.conditional, cond) {
            (true, Some(c)) => {
                instrument::label_embedding();
                Some(pass.linear("embed", c, false, false))
            }
            (true, None) => panic!("conditional generator called without a label"),
            (false, _) => None,
        };
        let norm = |pass: &mut Pass<'_>, name: &str, x: Var| match embedding {
            Some(e) => pass.cond_batch_norm(name, x, e, sn),
            None => pass.batch_norm(name, x),
        };
        match arch.family {
            Family::Mlp => {
                let mut h = z;
                for l in 0..arch.depth {
                    h = pass.linear(&format!("fc{l}"), h, sn, true);
                    h = norm(pass, &format!("bn{l}"), h);
                    h = pass.g.relu(h);
                }
                let o = pass.linear("out", h, sn, true);
                let t = pass.g.tanh(o);
                pass.g.scale(t, arch.point_scale)
            }
            Family::Conv => {
                let ch = arch.width;
                let h = pass.linear("fc", z, sn, true);
                let mut h = pass.g.reshape(h, &[n, ch, 4, 4]);
                for s in 0..arch.stages() {
                    let p = format!("block{s}");
                    let skip = pass.g.upsample2x(h);
                    let skip = pass.conv(&format!("{p}.sc"), skip, 1, 0, sn);
                    let mut r = norm(pass, &format!("{p}.bn1"), h);
                    r = pass.g.relu(r);
                    r = pass.g.upsample2x(r);
                    r = pass.conv(&format!("{p}.conv1"), r, 1, 1, sn);
                    r = norm(pass, &format!("{p}.bn2"), r);
                    r = pass.g.relu(r);
                    r = pass.conv(&format!("{p}.conv2"), r, 1, 1, sn);
                    h = pass.g.add(r, skip);
                }
                let h = pass.batch_norm("out_bn", h);
                let h = pass.g.relu(h);
                let h = pass.conv("out_conv", h, 1, 1, sn);
                pass.g.tanh(h)
            }
        }
    }

    fn check_inputs(&self, z: &LatentCode, cond: Option<&Array2<f64>>) -> Result<(), ModelError> {
        if z.0.ncols() != self.arch.d_z {
            return Err(ModelError::Config(format!("latent has {} columns, expected d_z={}", z.0.ncols(), self.arch.d_z)));
        }
        if !z.0.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Numeric("latent code has non-finite entries".into()));
        }
        if let Some(c) = cond {
            if c.nrows() != z.batch() {
                return Err(ModelError::Config(format!("latent batch {} but label batch {}", z.batch(), c.nrows())));
            }
            if c.ncols() != self.arch.k {
                return Err(ModelError::Config(format!("label has {} columns, expected k={}", c.ncols(), self.arch.k)));
            }
        } else if self.arch.conditional {
            return Err(ModelError::Config("conditional generator needs a label".into()));
        }
        if !self.net.all_finite() {
            return Err(ModelError::Numeric("generator parameters are not finite".into()));
        }
        Ok(())
    }

    /// Standalone forward pass without gradients.
    pub fn generate(&self, z: &LatentCode, cond: Option<&Array2<f64>>, phase: Phase) -> Result<ArrayD<f64>, ModelError> {
        self.check_inputs(z, cond)?;
        let mut g = Graph::new();
        let zv = g.constant(z.0.clone().into_dyn());
        let cv = match (self.arch.conditional, cond) {
            (true, Some(c)) => Some(g.constant(c.clone().into_dyn())),
            _ => None,
        };
        let mut pass = Pass::new(&mut g, &self.net, "g", phase, false);
        let out = self.forward(&mut pass, zv, cv);
        Ok(g.value(out).clone())
    }
}
