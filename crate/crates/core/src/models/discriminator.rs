use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::Rng;

use super::nn::{Builder, Init, Pass, Phase, LEAK};
use super::{ArchConfig, Family, ModelError, NetworkParams};
use crate::graph::{Graph, Var};
use crate::instrument;

/// Discriminator outputs on the graph, each of shape (batch, 1).
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub unary: Var,
    /// Absent when no label was given (unconditional training).
    pub joint: Option<Var>,
}

/// Per-sample unary and joint scores as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePair {
    pub unary: Array1<f64>,
    pub joint: Option<Array1<f64>>,
}

/// Discriminator `D(x, y)` with a projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: ArchConfig,
    pub net: NetworkParams,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let sn = arch.sn_d;
        let mut b = Builder::new(Init::Orthogonal, rng);
        let feat = match arch.family {
            Family::Mlp => {
                let mut input = arch.data_shape[0];
                for l in 0..arch.depth {
                    b.linear(&format!("fc{l}"), input, arch.width, sn, true);
                    input = arch.width;
                }
                arch.width
            }
            Family::Conv => {
                let ch = arch.width;
                let mut input = arch.data_shape[0];
                for s in 0..arch.stages() {
                    let p = format!("block{s}");
                    b.conv(&format!("{p}.conv1"), input, ch, 3, sn);
                    b.conv(&format!("{p}.conv2"), ch, ch, 3, sn);
                    b.conv(&format!("{p}.sc"), input, ch, 1, sn);
                    input = ch;
                }
                ch
            }
        };
        b.linear("unary", feat, 1, sn, true);
        if arch.conditional {
            // Stored as (feat, k) so the label maps to a feature-sized vector.
            b.linear("embed", arch.k, feat, sn, false);
        }
        Ok(Self { arch: arch.clone(), net: b.net })
    }

    /// Image features `phi(x)` of shape (batch, feat).
    fn features(&self, pass: &mut Pass<'_>, x: Var) -> Var {
        let arch = &self.arch;
        let sn = arch.sn_d;
        match arch.family {
            Family::Mlp => {
                let mut h = x;
                for l in 0..arch.depth {
                    h = pass.linear(&format!("fc{l}"), h, sn, true);
                    h = pass.g.leaky_relu(h, LEAK);
                }
                h
            }
            Family::Conv => {
                let mut h = x;
                for s in 0..arch.stages() {
                    let p = format!("block{s}");
                    let (skip, r) = if s == 0 {
                        let skip = pass.g.avg_pool2x2(h);
                        let skip = pass.conv(&format!("{p}.sc"), skip, 1, 0, sn);
                        let r = pass.conv(&format!("{p}.conv1"), h, 1, 1, sn);
                        (skip, r)
                    } else {
                        let skip = pass.conv(&format!("{p}.sc"), h, 1, 0, sn);
                        let skip = pass.g.avg_pool2x2(skip);
                        let r = pass.g.relu(h);
                        let r = pass.conv(&format!("{p}.conv1"), r, 1, 1, sn);
                        (skip, r)
                    };
                    let r = pass.g.relu(r);
                    let r = pass.conv(&format!("{p}.conv2"), r, 1, 1, sn);
                    let r = pass.g.avg_pool2x2(r);
                    h = pass.g.add(r, skip);
                }
                let h = pass.g.relu(h);
                let s = pass.g.sum_axes(h, &[2, 3]);
                let n = pass.g.shape(s)[0];
                let c = pass.g.shape(s)[1];
                pass.g.reshape(s, &[n, c])
            }
        }
    }

    /// Records the forward pass. The unary score is computed from the image
    /// alone; the label only enters through the projection term.
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var, label: Option<Var>) -> Scores {
        let sn = self.arch.sn_d;
        let phi = self.features(pass, x);
        let unary = pass.linear("unary", phi, sn, true);
        let joint = match label {
            Some(y) if self.arch.conditional => {
                instrument::label_embedding();
                let e = pass.linear("embed", y, sn, false);
                let prod = pass.g.mul(e, phi);
                let proj = pass.g.sum_axes(prod, &[1]);
                Some(pass.g.add(unary, proj))
            }
            _ => None,
        };
        Scores { unary, joint }
    }

    /// Standalone scoring without gradients.
    pub fn score(&self, x: &ArrayD<f64>, label: Option<&Array2<f64>>, phase: Phase) -> Result<ScorePair, ModelError> {
        let shape = x.shape();
        if shape.len() != self.arch.data_shape.len() + 1 || shape[1..] != self.arch.data_shape[..] {
            return Err(ModelError::Config(format!("input shape {:?} does not match data shape {:?}", shape, self.arch.data_shape)));
        }
        if let Some(y) = label {
            if y.ncols() != self.arch.k {
                return Err(ModelError::Config(format!("label has {} columns, expected k={}", y.ncols(), self.arch.k)));
            }
            if y.nrows() != shape[0] {
                return Err(ModelError::Config(format!("image batch {} but label batch {}", shape[0], y.nrows())));
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = label.map(|y| g.constant(y.clone().into_dyn()));
        let mut pass = Pass::new(&mut g, &self.net, "d", phase, false);
        let s = self.forward(&mut pass, xv, yv);
        let flat = |v: Var| g.value(v).clone().index_axis_move(Axis(1), 0).into_dimensionality().expect("score column");
        Ok(ScorePair { unary: flat(s.unary), joint: s.joint.map(flat) })
    }
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    proptest! {
        #[test]
        fn joint_score_is_affine_in_the_label(seed in any::<u64>(), alpha in 0.0..1.0f64, a in 0usize..4, b in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Discriminator::new(&ArchConfig::mlp(4), &mut rng).unwrap();
            let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[6, 2]), |_| rng.random_range(-2.0..2.0));
            let y1 = Array2::from_shape_fn((6, 4), |(_, j)| if j == a { 1.0 } else { 0.0 });
            let y2 = Array2::from_shape_fn((6, 4), |(_, j)| if j == b { 1.0 } else { 0.0 });
            let mix = &y1 * alpha + &y2 * (1.0 - alpha);
            let s1 = d.score(&x, Some(&y1), Phase::Eval).unwrap();
            let s2 = d.score(&x, Some(&y2), Phase::Eval).unwrap();
            let sm = d.score(&x, Some(&mix), Phase::Eval).unwrap();
            prop_assert_eq!(&s1.unary, &sm.unary);
            let (j1, j2, jm) = (s1.joint.unwrap(), s2.joint.unwrap(), sm.joint.unwrap());
            for i in 0..6 {
                prop_assert!((jm[i] - (alpha * j1[i] + (1.0 - alpha) * j2[i])).abs() <= 1e-5);
            }
        }
    }
}
