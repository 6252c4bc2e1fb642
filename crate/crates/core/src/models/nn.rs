//! Layer building blocks recorded on a [`Graph`].

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::NetworkParams;
use crate::graph::{Conv2dSpec, Graph, Tensor, Var};

/// How a network behaves during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// The network is being optimized: batch statistics, one power
    /// iteration per spectrally normalized weight, buffer updates emitted.
    Train,
    /// Another network is being optimized: batch statistics, stored
    /// power-iteration vectors, no buffer updates.
    Frozen,
    /// Inference: running statistics, stored power-iteration vectors.
    Eval,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const LEAK: f64 = 0.2;
/// Floor for the estimated top singular value.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Records one network's forward pass.
pub struct Pass<'a> {
    pub g: &'a mut Graph,
    net: &'a NetworkParams,
    tag: &'static str,
    phase: Phase,
    trainable: bool,
    updates: Vec<(String, Tensor)>,
}

impl<'a> Pass<'a> {
    pub fn new(g: &'a mut Graph, net: &'a NetworkParams, tag: &'static str, phase: Phase, trainable: bool) -> Self {
        Self { g, net, tag, phase, trainable, updates: Vec::new() }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Buffer updates to commit if this network owns the current step.
    pub fn into_updates(self) -> Vec<(String, Tensor)> {
        self.updates
    }

    fn key(&self, name: &str) -> String {
        format!("{}.{}", self.tag, name)
    }

    fn tensor(&self, name: &str) -> &'a Tensor {
        self.net
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {}.{name}", self.tag))
    }

    fn buffer(&self, name: &str) -> &'a Tensor {
        self.net
            .buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {}.{name}", self.tag))
    }

    pub fn param(&mut self, name: &str) -> Var {
        let key = self.key(name);
        let value = self.tensor(name);
        self.g.param(&key, value, self.trainable)
    }

    /// The weight `name`, divided by its spectral norm estimate when `sn`.
    pub fn weight(&mut self, name: &str, sn: bool) -> Var {
        let w = self.param(name);
        if !sn {
            return w;
        }
        let value = self.tensor(name);
        let rows = value.shape()[0];
        let w2 = value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, value.len() / rows))
            .expect("weight reshape");
        let u_name = format!("{name}.sn_u");
        let u = self.buffer(&u_name).clone().into_dimensionality().expect("sn_u is a vector");
        let (u, v) = match self.phase {
            Phase::Train => {
                let st = power_iteration(&w2, &SpectralState { u }, 1);
                self.updates.push((u_name, st.0.u.clone().into_dyn()));
                (st.0.u, st.1)
            }
            Phase::Frozen | Phase::Eval => {
                let v = normalize(&w2.t().dot(&u));
                (u, v)
            }
        };
        // sigma = u^T W v, differentiable in W with u, v held constant.
        let w_flat = self.g.reshape(w, &[rows, w2.ncols()]);
        let vc = self.g.constant(v.insert_axis(Axis(1)).into_dyn());
        let uc = self.g.constant(u.insert_axis(Axis(1)).into_dyn());
        let wv = self.g.matmul(w_flat, vc);
        let prod = self.g.mul(wv, uc);
        let sigma = self.g.sum(prod);
        let floor = self.g.constant(ArrayD::from_elem(IxDyn(&[]), SIGMA_FLOOR));
        let sigma = max_var(self.g, sigma, floor);
        self.g.div(w, sigma)
    }

    /// `x W^T + b` for `x` of shape (batch, in) and `W` of shape (out, in).
    pub fn linear(&mut self, name: &str, x: Var, sn: bool, bias: bool) -> Var {
        let w = self.weight(&format!("{name}.w"), sn);
        let wt = self.g.transpose(w);
        let y = self.g.matmul(x, wt);
        if bias {
            let b = self.param(&format!("{name}.b"));
            self.g.add(y, b)
        } else {
            y
        }
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: usize, sn: bool) -> Var {
        let w = self.weight(&format!("{name}.w"), sn);
        let y = self.g.conv2d(x, w, Conv2dSpec { stride, padding });
        let b = self.param(&format!("{name}.b"));
        self.g.add(y, b)
    }

    /// Normalizes over every axis except 1. No affine transform.
    pub fn normalize(&mut self, name: &str, x: Var) -> Var {
        let shape = self.g.shape(x).to_vec();
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let mut stat_shape = vec![1; shape.len()];
        stat_shape[1] = shape[1];
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        match self.phase {
            Phase::Eval => {
                let rm = self.buffer(&mean_name).clone().into_shape_with_order(IxDyn(&stat_shape)).expect("bn buffer");
                let rv = self.buffer(&var_name).clone().into_shape_with_order(IxDyn(&stat_shape)).expect("bn buffer");
                let inv = rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mc = self.g.constant(rm);
                let ic = self.g.constant(inv);
                let centered = self.g.sub(x, mc);
                self.g.mul(centered, ic)
            }
            Phase::Train | Phase::Frozen => {
                let mean = self.g.mean_axes(x, &axes);
                let centered = self.g.sub(x, mean);
                let sq = self.g.mul(centered, centered);
                let var = self.g.mean_axes(sq, &axes);
                if self.phase == Phase::Train {
                    let c = shape[1];
                    let bm = self.g.value(mean).iter().copied().collect::<Vec<_>>();
                    let bv = self.g.value(var).iter().copied().collect::<Vec<_>>();
                    let rm = self.buffer(&mean_name);
                    let rv = self.buffer(&var_name);
                    let nm = ArrayD::from_shape_fn(IxDyn(&[c]), |i| (1.0 - BN_MOMENTUM) * rm[[i[0]]] + BN_MOMENTUM * bm[i[0]]);
                    let nv = ArrayD::from_shape_fn(IxDyn(&[c]), |i| (1.0 - BN_MOMENTUM) * rv[[i[0]]] + BN_MOMENTUM * bv[i[0]]);
                    self.updates.push((mean_name, nm));
                    self.updates.push((var_name, nv));
                }
                let ve = self.g.offset(var, BN_EPS);
                let sd = self.g.sqrt(ve);
                self.g.div(centered, sd)
            }
        }
    }

    /// Batch norm with a learned per-channel affine transform.
    pub fn batch_norm(&mut self, name: &str, x: Var) -> Var {
        let xn = self.normalize(name, x);
        let ndim = self.g.shape(x).len();
        let c = self.g.shape(x)[1];
        let mut s = vec![1; ndim];
        s[1] = c;
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        let gamma = self.g.reshape(gamma, &s);
        let beta = self.g.reshape(beta, &s);
        let y = self.g.mul(xn, gamma);
        self.g.add(y, beta)
    }

    /// Class-conditional batch norm: gain `1 + W_g e` and bias `W_b e` from
    /// the label embedding `e` of shape (batch, embed_dim).
    pub fn cond_batch_norm(&mut self, name: &str, x: Var, embedding: Var, sn: bool) -> Var {
        let xn = self.normalize(name, x);
        let shape = self.g.shape(x).to_vec();
        let mut s = vec![1; shape.len()];
        s[0] = shape[0];
        s[1] = shape[1];
        let gain = self.linear(&format!("{name}.gain"), embedding, sn, false);
        let gain = self.g.offset(gain, 1.0);
        let bias = self.linear(&format!("{name}.bias"), embedding, sn, false);
        let gain = self.g.reshape(gain, &s);
        let bias = self.g.reshape(bias, &s);
        let y = self.g.mul(xn, gain);
        self.g.add(y, bias)
    }
}

fn max_var(g: &mut Graph, a: Var, floor: Var) -> Var {
    if g.scalar(a) >= g.scalar(floor) {
        a
    } else {
        floor
    }
}

/// Power-iteration state of one spectrally normalized weight: the current
/// estimate of the leading left singular vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Array1<f64>,
}

impl SpectralState {
    pub fn random<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let u: Array1<f64> = Array1::from_shape_fn(rows, |_| rng.sample(StandardNormal));
        Self { u: normalize(&u) }
    }
}

fn normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    v / n.max(SIGMA_FLOOR)
}

/// Runs `iters` power iterations; returns the new state, the right singular
/// vector estimate and the singular value estimate `u^T W v`.
pub fn power_iteration(w: &Array2<f64>, state: &SpectralState, iters: usize) -> (SpectralState, Array1<f64>, f64) {
    let mut u = state.u.clone();
    let mut v = normalize(&w.t().dot(&u));
    for _ in 0..iters {
        v = normalize(&w.t().dot(&u));
        u = normalize(&w.dot(&v));
    }
    let sigma = u.dot(&w.dot(&v));
    (SpectralState { u }, v, sigma)
}

/// One power-iteration step followed by `W / sigma`.
///
/// Weights of any rank are flattened to `(shape[0], rest)`. A zero matrix is
/// returned unchanged because sigma is floored at [`SIGMA_FLOOR`].
pub fn spectral_normalize(weight: &Tensor, state: &SpectralState) -> (Tensor, SpectralState) {
    let rows = weight.shape()[0];
    let w2 = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, weight.len() / rows))
        .expect("weight reshape");
    let (next, _, sigma) = power_iteration(&w2, state, 1);
    let sigma = sigma.max(SIGMA_FLOOR);
    (weight.mapv(|x| x / sigma), next)
}

/// Orthogonal initialization of a weight flattened to `(shape[0], rest)`.
pub fn orthogonal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = nalgebra::DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            for i in 0..big {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let m = Array2::from_shape_fn((rows, cols), |(i, j)| if rows >= cols { q[(i, j)] } else { q[(j, i)] });
    m.into_shape_with_order(IxDyn(shape)).expect("orthogonal reshape")
}

/// Normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Orthogonal,
    FanIn,
}

/// Builds parameter tensors with a consistent naming scheme.
pub(crate) struct Builder<'r, R: Rng + ?Sized> {
    pub net: NetworkParams,
    pub init: Init,
    pub rng: &'r mut R,
}

impl<'r, R: Rng + ?Sized> Builder<'r, R> {
    pub fn new(init: Init, rng: &'r mut R) -> Self {
        Self { net: NetworkParams::default(), init, rng }
    }

    fn weight(&mut self, name: String, shape: &[usize], sn: bool) {
        let w = match self.init {
            Init::Orthogonal => orthogonal(shape, self.rng),
            Init::FanIn => fan_in_normal(shape, self.rng),
        };
        if sn {
            let st = SpectralState::random(shape[0], self.rng);
            self.net.buffers.insert(format!("{name}.sn_u"), st.u.into_dyn());
        }
        self.net.params.insert(name, w);
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, sn: bool, bias: bool) {
        self.weight(format!("{name}.w"), &[output, input], sn);
        if bias {
            self.net.params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, output])));
        }
    }

    pub fn conv(&mut self, name: &str, input: usize, output: usize, kernel: usize, sn: bool) {
        self.weight(format!("{name}.w"), &[output, input, kernel, kernel], sn);
        self.net.params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, output, 1, 1])));
    }

    fn running_stats(&mut self, name: &str, channels: usize) {
        self.net.buffers.insert(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels])));
        self.net.buffers.insert(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels])));
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.running_stats(name, channels);
        self.net.params.insert(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        self.net.params.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
    }

    pub fn cond_batch_norm(&mut self, name: &str, channels: usize, embed_dim: usize, sn: bool) {
        self.running_stats(name, channels);
        self.linear(&format!("{name}.gain"), embed_dim, channels, sn, false);
        self.linear(&format!("{name}.bias"), embed_dim, channels, sn, false);
    }
}

/// Applies committed buffer updates.
pub fn commit(net: &mut NetworkParams, updates: Vec<(String, Tensor)>) {
    for (name, value) in updates {
        net.buffers.insert(name, value);
    }
}
