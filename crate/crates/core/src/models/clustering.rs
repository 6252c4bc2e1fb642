use ndarray::{Array2, ArrayD};
use rand::Rng;

use super::nn::{Builder, Init, Pass, Phase};
use super::{ArchConfig, Backbone, ClusterProbs, ModelError, NetworkParams};
use crate::graph::{as2, Graph, Var};
use crate::instrument;

const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Clustering network `C`: `p(y|x) = softmax(C(x))`.
///
/// The penultimate features are tapped after global pooling (conv
/// backbones) or after the last hidden layer (mlp), right before the linear
/// head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringNet {
    pub arch: ArchConfig,
    pub net: NetworkParams,
}

/// Graph outputs of one clustering pass.
#[derive(Clone, Copy, Debug)]
pub struct ClusterOutputs {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

fn small_widths(c_width: usize) -> [usize; 4] {
    [(c_width / 8).max(1), (c_width / 4).max(1), (c_width / 2).max(1), c_width]
}

impl ClusteringNet {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let sn = arch.sn_c;
        let mut b = Builder::new(Init::FanIn, rng);
        match arch.backbone {
            Backbone::Mlp => {
                let mut input = arch.data_shape[0];
                for l in 0..arch.depth {
                    b.linear(&format!("fc{l}"), input, arch.c_width, sn, true);
                    input = arch.c_width;
                }
            }
            Backbone::Small => {
                let mut input = arch.data_shape[0];
                for (s, w) in small_widths(arch.c_width).into_iter().enumerate() {
                    b.conv(&format!("stage{s}"), input, w, 3, sn);
                    input = w;
                }
            }
            Backbone::ResNet18 => {
                b.conv("stem", arch.data_shape[0], 64, 3, sn);
                b.batch_norm("stem_bn", 64);
                let mut input = 64;
                for (l, &w) in RESNET_WIDTHS.iter().enumerate() {
                    for blk in 0..2 {
                        let p = format!("layer{l}.{blk}");
                        b.conv(&format!("{p}.conv1"), input, w, 3, sn);
                        b.batch_norm(&format!("{p}.bn1"), w);
                        b.conv(&format!("{p}.conv2"), w, w, 3, sn);
                        b.batch_norm(&format!("{p}.bn2"), w);
                        if input != w {
                            b.conv(&format!("{p}.down"), input, w, 1, sn);
                            b.batch_norm(&format!("{p}.down_bn"), w);
                        }
                        input = w;
                    }
                }
            }
        }
        let mut net = b.net;
        // Zero-initialized head: uniform posteriors at the start of training.
        net.params.insert("head.w".into(), ArrayD::zeros(ndarray::IxDyn(&[arch.k, arch.penultimate_width()])));
        net.params.insert("head.b".into(), ArrayD::zeros(ndarray::IxDyn(&[1, arch.k])));
        Ok(Self { arch: arch.clone(), net })
    }

    fn backbone(&self, pass: &mut Pass<'_>, x: Var) -> Var {
        let arch = &self.arch;
        let sn = arch.sn_c;
        let flatten = |pass: &mut Pass<'_>, h: Var| {
            let m = pass.g.mean_axes(h, &[2, 3]);
            let n = pass.g.shape(m)[0];
            let c = pass.g.shape(m)[1];
            pass.g.reshape(m, &[n, c])
        };
        match arch.backbone {
            Backbone::Mlp => {
                let mut h = x;
                for l in 0..arch.depth {
                    h = pass.linear(&format!("fc{l}"), h, sn, true);
                    h = pass.g.relu(h);
                }
                h
            }
            Backbone::Small => {
                let mut h = x;
                for s in 0..4 {
                    h = pass.conv(&format!("stage{s}"), h, 1, 1, sn);
                    h = pass.g.relu(h);
                    let side = pass.g.shape(h)[2];
                    if side >= 2 && side % 2 == 0 {
                        h = pass.g.avg_pool2x2(h);
                    }
                }
                flatten(pass, h)
            }
            Backbone::ResNet18 => {
                let mut h = pass.conv("stem", x, 1, 1, sn);
                h = pass.batch_norm("stem_bn", h);
                h = pass.g.relu(h);
                let mut input = 64;
                for (l, &w) in RESNET_WIDTHS.iter().enumerate() {
                    for blk in 0..2 {
                        let p = format!("layer{l}.{blk}");
                        let stride = if blk == 0 && l > 0 { 2 } else { 1 };
                        let mut r = pass.conv(&format!("{p}.conv1"), h, stride, 1, sn);
                        r = pass.batch_norm(&format!("{p}.bn1"), r);
                        r = pass.g.relu(r);
                        r = pass.conv(&format!("{p}.conv2"), r, 1, 1, sn);
                        r = pass.batch_norm(&format!("{p}.bn2"), r);
                        let skip = if input != w {
                            let s = pass.conv(&format!("{p}.down"), h, stride, 0, sn);
                            pass.batch_norm(&format!("{p}.down_bn"), s)
                        } else {
                            h
                        };
                        let sum = pass.g.add(r, skip);
                        h = pass.g.relu(sum);
                        input = w;
                    }
                }
                flatten(pass, h)
            }
        }
    }

    /// Records the forward pass.
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> ClusterOutputs {
        instrument::clustering_forward();
        let features = self.backbone(pass, x);
        let logits = pass.linear("head", features, false, true);
        let probs = pass.g.softmax(logits);
        ClusterOutputs { features, logits, probs }
    }

    fn run(&self, x: &ArrayD<f64>, phase: Phase) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>), ModelError> {
        let shape = x.shape();
        if shape.len() != self.arch.data_shape.len() + 1 || shape[1..] != self.arch.data_shape[..] {
            return Err(ModelError::Config(format!("input shape {:?} does not match data shape {:?}", shape, self.arch.data_shape)));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut pass = Pass::new(&mut g, &self.net, "c", phase, false);
        let out = self.forward(&mut pass, xv);
        Ok((as2(g.value(out.features)), as2(g.value(out.logits)), as2(g.value(out.probs))))
    }

    pub fn probs(&self, x: &ArrayD<f64>, phase: Phase) -> Result<ClusterProbs, ModelError> {
        Ok(ClusterProbs(self.run(x, phase)?.2))
    }

    pub fn logits(&self, x: &ArrayD<f64>, phase: Phase) -> Result<Array2<f64>, ModelError> {
        Ok(self.run(x, phase)?.1)
    }

    /// Features of the layer feeding the linear head.
    pub fn penultimate_features(&self, x: &ArrayD<f64>, phase: Phase) -> Result<Array2<f64>, ModelError> {
        Ok(self.run(x, phase)?.0)
    }
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    proptest! {
        #[test]
        fn posteriors_sum_to_one(seed in any::<u64>(), v in prop::collection::vec(-1e3..1e3f64, 2..40)) {
            let n = v.len() / 2;
            prop_assume!(n > 0);
            let c = ClusteringNet::new(&ArchConfig::mlp(5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[n, 2]), v[..2 * n].to_vec()).unwrap();
            for phase in [Phase::Eval, Phase::Frozen] {
                let p = c.probs(&x, phase).unwrap();
                for row in p.0.rows() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                    prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
                }
            }
        }
    }
}
