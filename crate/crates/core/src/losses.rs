//! Adversarial, mutual-information and multi-view clustering objectives.
//!
//! All reductions are batch means. Each function records its computation on
//! the graph so gradients reach whichever network's parameters are bound as
//! trainable; the stop-gradient structure lives in the trainer, which binds
//! the other networks as constants.
//!
//! The [`values`] submodule evaluates the same functions on plain arrays.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::models::Scores;

/// Floor applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn batch(g: &Graph, v: Var) -> Result<usize, LossError> {
    let n = g.shape(v).first().copied().unwrap_or(0);
    if n == 0 {
        Err(LossError::EmptyBatch)
    } else {
        Ok(n)
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `mean[max(0, 1-u_r) + max(0, 1-s_r) + max(0, 1+u_f) + max(0, 1+s_f)]`.
///
/// When the scores carry no joint term (unconditional training) only the two
/// unary hinges contribute.
pub fn d_hinge(g: &mut Graph, real: Scores, fake: Scores) -> Result<Var, LossError> {
    batch(g, real.unary)?;
    batch(g, fake.unary)?;
    same_shape(g, real.unary, fake.unary, "real vs fake batch")?;
    let nf = g.neg(fake.unary);
    let mut terms = vec![g.hinge(real.unary), g.hinge(nf)];
    match (real.joint, fake.joint) {
        (Some(sr), Some(sf)) => {
            terms.push(g.hinge(sr));
            let nsf = g.neg(sf);
            terms.push(g.hinge(nsf));
        }
        (None, None) => {}
        _ => return Err(LossError::Shape("joint score present on only one side".into())),
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(g.mean(total))
}

/// `mean[-u_f - s_f]`.
pub fn g_adv(g: &mut Graph, fake: Scores) -> Result<Var, LossError> {
    batch(g, fake.unary)?;
    let total = match fake.joint {
        Some(s) => g.add(fake.unary, s),
        None => fake.unary,
    };
    let m = g.mean(total);
    Ok(g.neg(m))
}

/// `mean_i[-log p_i(c_i)]`, written as the cross-entropy against the one-hot
/// conditioning rows.
pub fn mutual_information(g: &mut Graph, fake_probs: Var, onehot: Var) -> Result<Var, LossError> {
    cross_entropy(g, onehot, fake_probs)
}

/// `mean_i sum_c -q_ic log p_ic` with `q` (the augmented view) detached.
pub fn aug_consistency(g: &mut Graph, p: Var, q: Var) -> Result<Var, LossError> {
    let q = g.detach(q);
    cross_entropy(g, q, p)
}

fn cross_entropy(g: &mut Graph, target: Var, probs: Var) -> Result<Var, LossError> {
    let n = batch(g, probs)?;
    same_shape(g, target, probs, "target vs probabilities")?;
    let logp = g.ln_clamped(probs, PROB_EPS);
    let prod = g.mul(target, logp);
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// `mean[s_r]`: the clustering network lowers the discriminator's joint score
/// on real pairs.
pub fn c_adv(g: &mut Graph, real: Scores) -> Result<Var, LossError> {
    let s = real
        .joint
        .ok_or_else(|| LossError::Shape("c_adv needs joint scores".into()))?;
    batch(g, s)?;
    Ok(g.mean(s))
}

/// Loss weights `(lambda_adv, lambda_mi, lambda_aug)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub adv: f64,
    pub mi: f64,
    pub aug: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { adv: 1.0, mi: 1.0, aug: 1.0 }
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub d_hinge: f64,
    pub g_adv: f64,
    pub g_mi: f64,
    pub c_adv: f64,
    pub c_aug: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.d_hinge, self.g_adv, self.g_mi, self.c_adv, self.c_aug]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objectives {
    pub generator: f64,
    pub clustering: f64,
    pub discriminator: f64,
}

pub fn combine(losses: &LossBreakdown, w: Weights) -> Objectives {
    Objectives {
        generator: w.adv * losses.g_adv + w.mi * losses.g_mi,
        clustering: w.adv * losses.c_adv + w.aug * losses.c_aug,
        discriminator: w.adv * losses.d_hinge,
    }
}

/// The same objectives on plain arrays.
pub mod values {
    use ndarray::{Array1, Array2, Axis};

    use super::LossError;
    use crate::graph::Graph;
    use crate::models::{ScorePair, Scores};

    fn column(g: &mut Graph, v: &Array1<f64>) -> crate::graph::Var {
        g.constant(v.clone().insert_axis(Axis(1)).into_dyn())
    }

    fn bind(g: &mut Graph, s: &ScorePair) -> Scores {
        let unary = column(g, &s.unary);
        let joint = s.joint.as_ref().map(|j| column(g, j));
        Scores { unary, joint }
    }

    pub fn d_hinge(real: &ScorePair, fake: &ScorePair) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let r = bind(&mut g, real);
        let f = bind(&mut g, fake);
        let l = super::d_hinge(&mut g, r, f)?;
        Ok(g.scalar(l))
    }

    pub fn g_adv(fake: &ScorePair) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let f = bind(&mut g, fake);
        let l = super::g_adv(&mut g, f)?;
        Ok(g.scalar(l))
    }

    pub fn c_adv(real: &ScorePair) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let r = bind(&mut g, real);
        let l = super::c_adv(&mut g, r)?;
        Ok(g.scalar(l))
    }

    pub fn mutual_information(fake_probs: &Array2<f64>, onehot: &Array2<f64>) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let p = g.constant(fake_probs.clone().into_dyn());
        let c = g.constant(onehot.clone().into_dyn());
        let l = super::mutual_information(&mut g, p, c)?;
        Ok(g.scalar(l))
    }

    pub fn aug_consistency(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let pv = g.constant(p.clone().into_dyn());
        let qv = g.constant(q.clone().into_dyn());
        let l = super::aug_consistency(&mut g, pv, qv)?;
        Ok(g.scalar(l))
    }
}

#[cfg(test)]
mod tests {
    use super::values::*;
    use super::{combine, LossBreakdown, LossError, Weights, PROB_EPS};
    use crate::graph::{Graph, Var};
    use ndarray::{array, Array1, Array2};

    fn pair(u: &[f64], s: &[f64]) -> crate::models::ScorePair {
        crate::models::ScorePair { unary: Array1::from(u.to_vec()), joint: Some(Array1::from(s.to_vec())) }
    }

    #[test]
    fn d_hinge_examples() {
        assert_eq!(d_hinge(&pair(&[2.0, 2.0], &[2.0, 2.0]), &pair(&[-2.0, -2.0], &[-2.0, -2.0])).unwrap(), 0.0);
        assert_eq!(d_hinge(&pair(&[2.0], &[0.5]), &pair(&[-2.0], &[0.5])).unwrap(), 2.0);
        assert_eq!(d_hinge(&pair(&[0.0], &[0.0]), &pair(&[0.0], &[0.0])).unwrap(), 4.0);
    }

    #[test]
    fn d_hinge_unary_only() {
        let r = crate::models::ScorePair { unary: array![0.0], joint: None };
        let f = crate::models::ScorePair { unary: array![0.0], joint: None };
        assert_eq!(d_hinge(&r, &f).unwrap(), 2.0);
    }

    #[test]
    fn empty_batches_error() {
        let e = pair(&[], &[]);
        assert_eq!(d_hinge(&e, &e), Err(LossError::EmptyBatch));
        assert_eq!(g_adv(&e), Err(LossError::EmptyBatch));
        assert_eq!(c_adv(&e), Err(LossError::EmptyBatch));
    }

    #[test]
    fn g_adv_examples() {
        assert_eq!(g_adv(&pair(&[0.0], &[0.0])).unwrap(), 0.0);
        assert_eq!(g_adv(&pair(&[1.5, 1.5], &[0.5, 0.5])).unwrap(), -2.0);
        assert_eq!(g_adv(&pair(&[1.0, -1.0], &[1.0, -1.0])).unwrap(), 0.0);
    }

    #[test]
    fn mutual_information_examples() {
        let onehot = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(mutual_information(&onehot, &onehot).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 4), 0.25);
        let c = array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!((mutual_information(&uniform, &c).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = array![[0.5, 0.25, 0.25]];
        let c = array![[0.0, 1.0, 0.0]];
        assert!((mutual_information(&p, &c).unwrap() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = array![[1.0, 0.0]];
        let c = array![[0.0, 1.0]];
        let v = mutual_information(&p, &c).unwrap();
        assert!(v.is_finite());
        assert!((v - (-PROB_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn aug_consistency_examples() {
        let onehot = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(aug_consistency(&onehot, &onehot).unwrap(), 0.0);
        let half = array![[0.5, 0.5]];
        assert!((aug_consistency(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((aug_consistency(&half, &array![[1.0, 0.0]]).unwrap() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn c_adv_examples() {
        assert_eq!(c_adv(&pair(&[9.0, 9.0], &[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(c_adv(&pair(&[0.0, 0.0], &[1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(c_adv(&pair(&[0.0, 0.0], &[-1.0, -3.0])).unwrap(), -2.0);
    }

    #[test]
    fn combine_examples() {
        let b = LossBreakdown { d_hinge: 1.0, g_adv: -2.0, g_mi: 1.386, c_adv: 0.5, c_aug: 0.25 };
        let o = combine(&b, Weights::default());
        assert!((o.generator - -0.614).abs() < 1e-12);
        assert_eq!(o.clustering, 0.75);
        assert_eq!(o.discriminator, 1.0);
        let o = combine(&b, Weights { mi: 0.0, ..Weights::default() });
        assert_eq!(o.generator, -2.0);
        assert_eq!(Weights::default(), Weights { adv: 1.0, mi: 1.0, aug: 1.0 });
    }

    #[test]
    fn aug_gradient_does_not_reach_target() {
        let mut g = Graph::new();
        let p = g.variable(array![[0.7, 0.3]].into_dyn());
        let q = g.variable(array![[0.4, 0.6]].into_dyn());
        let l = aug_consistency_graph(&mut g, p, q);
        let grads = g.backward(l);
        assert!(grads.get(q).is_none());
        // d/dp of -(q log p) = -q/p
        let gp = grads.get(p).unwrap();
        assert!((gp[[0, 0]] - (-0.4 / 0.7)).abs() < 1e-12);
        assert!((gp[[0, 1]] - (-0.6 / 0.3)).abs() < 1e-12);
    }

    fn aug_consistency_graph(g: &mut Graph, p: Var, q: Var) -> Var {
        super::aug_consistency(g, p, q).unwrap()
    }
}

#[cfg(test)]
mod props {
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    use super::values;
    use crate::models::ScorePair;

    fn scores(n: usize) -> impl Strategy<Value = ScorePair> {
        (prop::collection::vec(-3.0..3.0f64, n), prop::collection::vec(-3.0..3.0f64, n))
            .prop_map(|(u, s)| ScorePair { unary: Array1::from(u), joint: Some(Array1::from(s)) })
    }

    fn probs(n: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(1e-6..1.0f64, n * k).prop_map(move |v| {
            let mut p = Array2::from_shape_vec((n, k), v).unwrap();
            for mut row in p.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            p
        })
    }

    proptest! {
        #[test]
        fn d_hinge_is_nonnegative_and_zero_only_past_margins((r, f) in (1usize..20).prop_flat_map(|n| (scores(n), scores(n)))) {
            let l = values::d_hinge(&r, &f).unwrap();
            prop_assert!(l >= 0.0);
            let past = r.unary.iter().chain(r.joint.as_ref().unwrap()).all(|&v| v >= 1.0)
                && f.unary.iter().chain(f.joint.as_ref().unwrap()).all(|&v| v <= -1.0);
            prop_assert_eq!(l == 0.0, past);
        }

        #[test]
        fn d_hinge_vanishes_beyond_margins(n in 1usize..20, m in 0.0..2.0f64) {
            let r = ScorePair { unary: Array1::from_elem(n, 1.0 + m), joint: Some(Array1::from_elem(n, 1.0 + m)) };
            let f = ScorePair { unary: Array1::from_elem(n, -1.0 - m), joint: Some(Array1::from_elem(n, -1.0 - m)) };
            prop_assert_eq!(values::d_hinge(&r, &f).unwrap(), 0.0);
        }

        #[test]
        fn cross_entropies_are_nonnegative(
            (p, q, idx) in (1usize..12, 2usize..8).prop_flat_map(|(n, k)| (probs(n, k), probs(n, k), prop::collection::vec(0..k, n)))
        ) {
            let (n, k) = p.dim();
            let mut onehot = Array2::zeros((n, k));
            for (i, &c) in idx.iter().enumerate() {
                onehot[[i, c]] = 1.0;
            }
            prop_assert!(values::mutual_information(&p, &onehot).unwrap() >= 0.0);
            prop_assert!(values::aug_consistency(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(values::mutual_information(&onehot, &onehot).unwrap(), 0.0);
        }
    }
}
