//! A small reverse-mode automatic differentiation tape over `f64` arrays.
//!
//! Every network forward pass records its operations on a [`Graph`]. Values
//! are either *tracked* (they depend on a trainable parameter) or constants.
//! Gradients only flow through tracked nodes, which is how the trainer makes
//! one network's parameters constant while another network is updated: the
//! frozen network's weights are bound as constants and no gradient reaches
//! them.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var, f64),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxes(Var),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        spec: Conv2dSpec,
        cols: Vec<Array2<f64>>,
    },
    Upsample2x(Var),
    AvgPool2x2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation tape. Create one per optimization step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a node with {} elements", t.len());
        t.iter().copied().next().unwrap_or(f64::NAN)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter once per graph. Later calls with the same key
    /// return the same node so gradients from several uses accumulate.
    pub fn param(&mut self, key: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(key) {
            debug_assert_eq!(self.tracked(v), trainable, "parameter {key} rebound with a different trainable flag");
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(key.to_string(), v);
        v
    }

    /// Gradients of every bound trainable parameter whose key starts with
    /// `prefix`, keyed by the remainder of the name.
    pub fn param_grads(&self, grads: &Gradients, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (key, &v) in &self.params {
            if !self.tracked(v) {
                continue;
            }
            if let Some(rest) = key.strip_prefix(prefix) {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).raw_dim()));
                out.insert(rest.to_string(), g);
            }
        }
        out
    }

    /// Same value, no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Div(a, b), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        let tracked = self.tracked(a);
        self.push(value, Op::Neg(a), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        let tracked = self.tracked(a);
        self.push(value, Op::Offset(a), tracked)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul shape mismatch {:?} x {:?}", av.shape(), bv.shape());
        let value = av.dot(&bv).into_dyn();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let tracked = self.tracked(a);
        self.push(value, Op::LeakyRelu(a, slope), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let tracked = self.tracked(a);
        self.push(value, Op::Exp(a), tracked)
    }

    /// Natural log with the argument clamped from below at `floor`.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        let tracked = self.tracked(a);
        self.push(value, Op::Ln(a, floor), tracked)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let tracked = self.tracked(a);
        self.push(value, Op::Sqrt(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::SumAll(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Tensor::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        let tracked = self.tracked(a);
        self.push(value, Op::MeanAll(a), tracked)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut value = self.value(a).clone();
        for &ax in axes {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let tracked = self.tracked(a);
        self.push(value, Op::SumAxes(a), tracked)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / count as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let tracked = self.tracked(a);
        self.push(value, Op::Reshape(a), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = as2(self.value(a)).t().as_standard_layout().into_owned().into_dyn();
        let tracked = self.tracked(a);
        self.push(value, Op::Transpose(a), tracked)
    }

    /// Softmax over the last axis of a rank-2 node.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(&as2(self.value(a))).into_dyn();
        let tracked = self.tracked(a);
        self.push(value, Op::Softmax(a), tracked)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = as2(self.value(a));
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let tracked = self.tracked(a);
        self.push(out.into_dyn(), Op::LogSoftmax(a), tracked)
    }

    /// 2-D cross-correlation. `input` is (N, C, H, W), `weight` is (O, C, kh, kw).
    pub fn conv2d(&mut self, input: Var, weight: Var, spec: Conv2dSpec) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = dims4(x);
        let (o, wc, kh, kw) = dims4(w);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let (oh, ow) = conv_out(h, wd, kh, kw, spec);
        let wmat = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * kh * kw))
            .expect("conv weight reshape");
        let mut out = Tensor::zeros(IxDyn(&[n, o, oh, ow]));
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(x, i, kh, kw, spec, oh, ow);
            let y = wmat.dot(&col);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let y = y.into_shape_with_order((o, oh, ow)).expect("conv output reshape");
            dst.assign(&y.into_dyn());
            cols.push(col);
        }
        let tracked = self.tracked(input) || self.tracked(weight);
        self.push(out, Op::Conv2d { input, weight, spec, cols }, tracked)
    }

    /// Nearest-neighbour 2x upsampling of (N, C, H, W).
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = dims4(x);
        let mut out = Tensor::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[i, ch, y, xx]] = x[[i, ch, y / 2, xx / 2]];
                    }
                }
            }
        }
        let tracked = self.tracked(a);
        self.push(out, Op::Upsample2x(a), tracked)
    }

    /// 2x2 average pooling with stride 2 of (N, C, H, W); H and W must be even.
    pub fn avg_pool2x2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = dims4(x);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x2 needs even spatial dims");
        let mut out = Tensor::zeros(IxDyn(&[n, c, h / 2, w / 2]));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        out[[i, ch, y, xx]] = 0.25
                            * (x[[i, ch, 2 * y, 2 * xx]]
                                + x[[i, ch, 2 * y + 1, 2 * xx]]
                                + x[[i, ch, 2 * y, 2 * xx + 1]]
                                + x[[i, ch, 2 * y + 1, 2 * xx + 1]]);
                    }
                }
            }
        }
        let tracked = self.tracked(a);
        self.push(out, Op::AvgPool2x2(a), tracked)
    }

    /// `max(0, 1 - x)` elementwise.
    pub fn hinge(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        let m = self.offset(n, 1.0);
        self.relu(m)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: HashMap<Var, Tensor> = HashMap::new();
        if !self.tracked(loss) {
            return Gradients { grads };
        }
        grads.insert(loss, Tensor::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let v = Var(idx);
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads.remove(&v) else { continue };
            let contribs = self.node_backward(node, &g);
            // Leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads.insert(v, g);
                continue;
            }
            for (target, gt) in contribs {
                if !self.tracked(target) {
                    continue;
                }
                match grads.get_mut(&target) {
                    Some(acc) => *acc += &gt,
                    None => {
                        grads.insert(target, gt);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, val(*a).shape())),
                (*b, sum_to_shape(&g.mapv(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    out.push((*a, sum_to_shape(&(g * val(*b)), val(*a).shape())));
                }
                if self.tracked(*b) {
                    out.push((*b, sum_to_shape(&(g * val(*a)), val(*b).shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    out.push((*a, sum_to_shape(&(g / val(*b)), val(*a).shape())));
                }
                if self.tracked(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = -(g * &node.value) / val(*b);
                    out.push((*b, sum_to_shape(&gb, val(*b).shape())));
                }
                out
            }
            Op::Neg(a) => vec![(*a, g.mapv(|x| -x))],
            Op::Scale(a, c) => vec![(*a, g.mapv(|x| x * c))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    out.push((*a, g2.dot(&as2(val(*b)).t()).into_dyn()));
                }
                if self.tracked(*b) {
                    out.push((*b, as2(val(*a)).t().dot(&g2).into_dyn()));
                }
                out
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(*a, d)]
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                vec![(*a, d)]
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                vec![(*a, d)]
            }
            Op::Exp(a) => vec![(*a, g * &node.value)],
            Op::Ln(a, floor) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x > *floor {
                        *d /= x
                    } else {
                        *d = 0.0
                    }
                });
                vec![(*a, d)]
            }
            Op::Sqrt(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 0.5 / y);
                vec![(*a, d)]
            }
            Op::SumAll(a) => {
                let s = g.iter().copied().next().unwrap_or(0.0);
                vec![(*a, Tensor::from_elem(val(*a).raw_dim(), s))]
            }
            Op::MeanAll(a) => {
                let n = val(*a).len().max(1) as f64;
                let s = g.iter().copied().next().unwrap_or(0.0) / n;
                vec![(*a, Tensor::from_elem(val(*a).raw_dim(), s))]
            }
            Op::SumAxes(a) => {
                let d = g
                    .broadcast(val(*a).raw_dim())
                    .expect("sum_axes broadcast")
                    .to_owned();
                vec![(*a, d)]
            }
            Op::Reshape(a) => {
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(val(*a).raw_dim())
                    .expect("reshape backward");
                vec![(*a, d)]
            }
            Op::Transpose(a) => vec![(*a, as2(g).t().as_standard_layout().into_owned().into_dyn())],
            Op::Softmax(a) => {
                let y = as2(&node.value);
                let g2 = as2(g);
                let dot = (&g2 * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = &y * &(&g2 - &dot);
                vec![(*a, d.into_dyn())]
            }
            Op::LogSoftmax(a) => {
                let y = as2(&node.value).mapv(f64::exp);
                let g2 = as2(g);
                let gs = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = &g2 - &(&y * &gs);
                vec![(*a, d.into_dyn())]
            }
            Op::Conv2d { input, weight, spec, cols } => {
                let x = val(*input);
                let w = val(*weight);
                let (n, c, h, wd) = dims4(x);
                let (o, _, kh, kw) = dims4(w);
                let (oh, ow) = conv_out(h, wd, kh, kw, *spec);
                let mut out = Vec::with_capacity(2);
                let gview = g.as_standard_layout();
                if self.tracked(*weight) {
                    let mut gw = Array2::<f64>::zeros((o, c * kh * kw));
                    for (i, col) in cols.iter().enumerate() {
                        let gi = gview
                            .index_axis(Axis(0), i)
                            .to_owned()
                            .into_shape_with_order((o, oh * ow))
                            .expect("conv grad reshape");
                        gw += &gi.dot(&col.t());
                    }
                    let gw = gw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).expect("conv gw reshape");
                    out.push((*weight, gw));
                }
                if self.tracked(*input) {
                    let wmat = w
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((o, c * kh * kw))
                        .expect("conv weight reshape");
                    let mut gx = Tensor::zeros(IxDyn(&[n, c, h, wd]));
                    for i in 0..n {
                        let gi = gview
                            .index_axis(Axis(0), i)
                            .to_owned()
                            .into_shape_with_order((o, oh * ow))
                            .expect("conv grad reshape");
                        let gcol = wmat.t().dot(&gi);
                        col2im(&gcol, &mut gx, i, kh, kw, *spec, oh, ow);
                    }
                    out.push((*input, gx));
                }
                out
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = dims4(val(*a));
                let mut d = Tensor::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                d[[i, ch, y / 2, x / 2]] += g[[i, ch, y, x]];
                            }
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::AvgPool2x2(a) => {
                let (n, c, h, w) = dims4(val(*a));
                let mut d = Tensor::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                d[[i, ch, y, x]] = 0.25 * g[[i, ch, y / 2, x / 2]];
                            }
                        }
                    }
                }
                vec![(*a, d)]
            }
        }
    }
}

pub(crate) fn as2(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a rank-2 array, got shape {:?}", t.shape()))
        .to_owned()
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 array, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn conv_out(h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> (usize, usize) {
    let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
    (oh, ow)
}

fn im2col(x: &Tensor, n: usize, kh: usize, kw: usize, spec: Conv2dSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (_, c, h, w) = dims4(x);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[n, ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(col: &Array2<f64>, gx: &mut Tensor, n: usize, kh: usize, kw: usize, spec: Conv2dSpec, oh: usize, ow: usize) {
    let (_, c, h, w) = dims4(gx);
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[n, ch, iy as usize, ix as usize]] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

/// Reduces a broadcast gradient back to `shape` by summing the expanded axes.
pub(crate) fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &target) in shape.iter().enumerate() {
        if target == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out.into_shape_with_order(IxDyn(shape)).expect("sum_to_shape")
}

/// Row-wise softmax, numerically shifted by the row maximum.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
