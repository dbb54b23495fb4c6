//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an eagerly evaluated tape: every operation computes its
//! value when it is recorded, and [`Graph::backward`] walks the tape in
//! reverse to accumulate adjoints. Graphs are cheap and meant to be built
//! once per training step.

mod gradcheck;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms at or below this are treated as zero (cosine convention).
pub const NORM_EPS: f64 = 1e-12;

/// Named trainable tensors.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Gradient per named leaf, same shapes as the leaves.
pub type Gradients = BTreeMap<String, Tensor>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Scale(Var, f64),
    SumAll(Var),
    SumAxis(Var),
    MeanAxis(Var, usize),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    /// Flat index of the winning entry for every output slot.
    MaxAxis(Var, Vec<usize>),
    NormAxis(Var),
    NormalizeRows(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Gather(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Scale(..) => "scale",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Relu(..) => "relu",
            Op::MaxAxis(..) => "max_axis",
            Op::NormAxis(..) => "norm_axis",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::SegmentMean(..) => "segment_mean",
            Op::Concat(..) => "concat",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    first_non_finite: Option<usize>,
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> [usize; 2] {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("{op}: shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

fn broadcast_map(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = broadcast_shape(a.shape(), b.shape(), op);
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(r, c, data);
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if a.rows() == 1 { 0 } else { i };
        let ib = if b.rows() == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if a.cols() == 1 { 0 } else { j };
            let jb = if b.cols() == 1 { 0 } else { j };
            data.push(f(a.get(ia, ja), b.get(ib, jb)));
        }
    }
    Tensor::new(r, c, data)
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..g.rows() {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if shape[1] == 1 { 0 } else { j };
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn check_axis(axis: usize) {
    assert!(axis < 2, "axis must be 0 or 1, got {axis}");
}

/// Lanes of a matrix along `axis`: for axis 1 each row is a lane, for axis 0
/// each column is. Returns (lane count, lane length, flat index fn).
fn lanes(t: &Tensor, axis: usize) -> (usize, usize, impl Fn(usize, usize) -> usize) {
    let (r, c) = (t.rows(), t.cols());
    let (count, len) = if axis == 1 { (r, c) } else { (c, r) };
    (count, len, move |lane: usize, k: usize| {
        if axis == 1 {
            lane * c + k
        } else {
            k * c + lane
        }
    })
}

fn reduced_shape(t: &Tensor, axis: usize) -> (usize, usize) {
    if axis == 1 {
        (t.rows(), 1)
    } else {
        (1, t.cols())
    }
}

fn softmax_lanes(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (count, len, idx) = lanes(x, axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for lane in 0..count {
        let m = (0..len).map(|k| d[idx(lane, k)]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..len).map(|k| (d[idx(lane, k)] - m).exp()).sum();
        let lz = z.ln();
        for k in 0..len {
            let i = idx(lane, k);
            out[i] = if log {
                d[i] - m - lz
            } else {
                (d[i] - m).exp() / z
            };
        }
    }
    Tensor::new(x.rows(), x.cols(), out)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(id)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Register a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name:?}"
        );
        let v = self.push(Op::Leaf, value, true);
        self.params.push((name, v));
        v
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let s = self.nodes[v.0].value.shape();
        [s[0], s[1]]
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = broadcast_map(self.value(a), self.value(b), name, f);
        let rg = self.grad_of(&[a, b]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.grad_of(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.grad_of(&[x]);
        self.push(Op::Transpose(x), value, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshape(rows, cols);
        let rg = self.grad_of(&[x]);
        self.push(Op::Reshape(x), value, rg)
    }

    /// Multiply by a fixed scalar (scalar broadcast).
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.grad_of(&[x]);
        self.push(Op::Scale(x, factor), value, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.grad_of(&[x]);
        self.push(Op::SumAll(x), value, rg)
    }

    /// Sum along `axis`, keeping the reduced dimension with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let t = self.value(x);
        let (count, len, idx) = lanes(t, axis);
        let d = t.data();
        let out: Vec<f64> = (0..count)
            .map(|lane| (0..len).map(|k| d[idx(lane, k)]).sum())
            .collect();
        let (r, c) = reduced_shape(t, axis);
        let rg = self.grad_of(&[x]);
        self.push(Op::SumAxis(x), Tensor::new(r, c, out), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let t = self.value(x);
        let (count, len, idx) = lanes(t, axis);
        let d = t.data();
        let out: Vec<f64> = (0..count)
            .map(|lane| (0..len).map(|k| d[idx(lane, k)]).sum::<f64>() / len as f64)
            .collect();
        let (r, c) = reduced_shape(t, axis);
        let rg = self.grad_of(&[x]);
        self.push(Op::MeanAxis(x, axis), Tensor::new(r, c, out), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.grad_of(&[x]);
        self.push(Op::Exp(x), value, rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let rg = self.grad_of(&[x]);
        self.push(Op::Ln(x), value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.grad_of(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    /// Maximum along `axis`. The adjoint flows to the first (lowest-index)
    /// maximizer of each lane.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let t = self.value(x);
        let (count, len, idx) = lanes(t, axis);
        let d = t.data();
        let mut out = Vec::with_capacity(count);
        let mut arg = Vec::with_capacity(count);
        for lane in 0..count {
            let mut best = idx(lane, 0);
            for k in 1..len {
                let i = idx(lane, k);
                if d[i] > d[best] {
                    best = i;
                }
            }
            arg.push(best);
            out.push(d[best]);
        }
        let (r, c) = reduced_shape(t, axis);
        let rg = self.grad_of(&[x]);
        self.push(Op::MaxAxis(x, arg), Tensor::new(r, c, out), rg)
    }

    /// Euclidean norm along `axis`.
    pub fn norm_axis(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let t = self.value(x);
        let (count, len, idx) = lanes(t, axis);
        let d = t.data();
        let out: Vec<f64> = (0..count)
            .map(|lane| (0..len).map(|k| d[idx(lane, k)].powi(2)).sum::<f64>().sqrt())
            .collect();
        let (r, c) = reduced_shape(t, axis);
        let rg = self.grad_of(&[x]);
        self.push(Op::NormAxis(x), Tensor::new(r, c, out), rg)
    }

    /// Scale every row to unit length. Rows with norm at or below
    /// [`NORM_EPS`] map to zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = t.row_norm(r);
            let row = out.row_slice_mut(r);
            if n <= NORM_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let rg = self.grad_of(&[x]);
        self.push(Op::NormalizeRows(x), out, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let value = softmax_lanes(self.value(x), axis, false);
        let rg = self.grad_of(&[x]);
        self.push(Op::Softmax(x, axis), value, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        check_axis(axis);
        let value = softmax_lanes(self.value(x), axis, true);
        let rg = self.grad_of(&[x]);
        self.push(Op::LogSoftmax(x, axis), value, rg)
    }

    /// Rows of `x` picked by `indices`. The index list is not differentiable.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let t = self.value(x);
        assert!(
            indices.iter().all(|&i| i < t.rows()),
            "gather index out of range for {} rows",
            t.rows()
        );
        let value = t.gather_rows(indices);
        let rg = self.grad_of(&[x]);
        self.push(Op::Gather(x, indices.to_vec()), value, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(x, &idx)
    }

    /// Mean of consecutive row groups: output row `s` averages rows
    /// `offsets[s]..offsets[s + 1]`. Every group must be non-empty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Var {
        let t = self.value(x);
        assert!(offsets.len() >= 2, "segment_mean needs at least one segment");
        assert_eq!(offsets[0], 0, "segment offsets must start at 0");
        assert_eq!(
            *offsets.last().unwrap(),
            t.rows(),
            "segment offsets must end at the row count"
        );
        let c = t.cols();
        let segments = offsets.len() - 1;
        let mut out = vec![0.0; segments * c];
        for s in 0..segments {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(hi > lo, "segment {s} is empty");
            let inv = 1.0 / (hi - lo) as f64;
            let o = &mut out[s * c..(s + 1) * c];
            for r in lo..hi {
                for (acc, v) in o.iter_mut().zip(t.row_slice(r)) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.grad_of(&[x]);
        self.push(
            Op::SegmentMean(x, offsets.to_vec()),
            Tensor::new(segments, c, out),
            rg,
        )
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.grad_of(parts);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(rows, c, data), rg)
    }

    /// Reverse pass from a scalar root. Every registered parameter gets an
    /// entry; parameters the root does not depend on get exact zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if let Some(bad) = self.first_non_finite {
            return Err(Error::Numeric {
                node: format!("node {bad} ({})", self.nodes[bad].op.name()),
                message: "non-finite value in forward pass".into(),
            });
        }
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &node.value, g, &mut grads);
        }

        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let s = self.value(*v).shape();
                    Tensor::zeros(s[0], s[1])
                });
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, y: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                self.accumulate(grads, *b, reduce_to(g, sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                self.accumulate(grads, *b, reduce_to(g.map(|v| -v), sb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = broadcast_map(&g, tb, "mul", |x, y| x * y);
                let gb = broadcast_map(&g, ta, "mul", |x, y| x * y);
                self.accumulate(grads, *a, reduce_to(ga, ta.shape()));
                self.accumulate(grads, *b, reduce_to(gb, tb.shape()));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = broadcast_map(&g, tb, "div", |x, y| x / y);
                // d(a/b)/db = -y / b
                let gy = broadcast_map(&g, y, "div", |x, q| x * q);
                let gb = broadcast_map(&gy, tb, "div", |x, d| -x / d);
                self.accumulate(grads, *a, reduce_to(ga, ta.shape()));
                self.accumulate(grads, *b, reduce_to(gb, tb.shape()));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(&tb.transpose()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ta.transpose().matmul(&g));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Reshape(x) => {
                let s = self.value(*x).shape();
                self.accumulate(grads, *x, g.reshape(s[0], s[1]));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::SumAll(x) => {
                let s = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(s[0], s[1], g.item()));
            }
            Op::SumAxis(x) => {
                let s = self.value(*x).shape();
                self.accumulate(grads, *x, broadcast_map(&Tensor::zeros(s[0], s[1]), &g, "sum", |_, v| v));
            }
            Op::MeanAxis(x, axis) => {
                let t = self.value(*x);
                let n = if *axis == 1 { t.cols() } else { t.rows() } as f64;
                let z = Tensor::zeros(t.rows(), t.cols());
                self.accumulate(grads, *x, broadcast_map(&z, &g, "mean", |_, v| v / n));
            }
            Op::Exp(x) => {
                let gx = broadcast_map(&g, y, "exp", |a, b| a * b);
                self.accumulate(grads, *x, gx);
            }
            Op::Ln(x) => {
                let gx = broadcast_map(&g, self.value(*x), "ln", |a, b| a / b);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = broadcast_map(&g, self.value(*x), "relu", |a, b| if b > 0.0 { a } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::MaxAxis(x, arg) => {
                let s = self.value(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                for (slot, &flat) in arg.iter().enumerate() {
                    gx.data_mut()[flat] += g.data()[slot];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::NormAxis(x) => {
                let t = self.value(*x);
                let scale = broadcast_map(&g, y, "norm", |a, n| if n > 0.0 { a / n } else { 0.0 });
                let gx = broadcast_map(t, &scale, "norm", |v, s| v * s);
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows(x) => {
                let t = self.value(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let n = t.row_norm(r);
                    if n <= NORM_EPS {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (count, len, idx) = lanes(y, *axis);
                let mut gx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), g.data());
                for lane in 0..count {
                    let dot: f64 = (0..len).map(|k| yd[idx(lane, k)] * gd[idx(lane, k)]).sum();
                    for k in 0..len {
                        let i = idx(lane, k);
                        gx[i] = yd[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.rows(), y.cols(), gx));
            }
            Op::LogSoftmax(x, axis) => {
                let (count, len, idx) = lanes(y, *axis);
                let mut gx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), g.data());
                for lane in 0..count {
                    let total: f64 = (0..len).map(|k| gd[idx(lane, k)]).sum();
                    for k in 0..len {
                        let i = idx(lane, k);
                        gx[i] = gd[i] - yd[i].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.rows(), y.cols(), gx));
            }
            Op::Gather(x, indices) => {
                let s = self.value(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                for (k, &row) in indices.iter().enumerate() {
                    for (o, v) in gx.row_slice_mut(row).iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentMean(x, offsets) => {
                let s = self.value(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                for seg in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[seg], offsets[seg + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    for r in lo..hi {
                        for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(seg)) {
                            *o = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut row = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = (t.rows(), t.cols());
                    let slice = g.data()[row * c..(row + r) * c].to_vec();
                    self.accumulate(grads, p, Tensor::new(r, c, slice));
                    row += r;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
