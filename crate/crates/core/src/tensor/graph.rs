use std::collections::BTreeMap;

use super::conv::{ConvGeometry, Padding};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    Conv2dTranspose,
    Relu,
    LeakyRelu,
    Exp,
    Log,
    Sigmoid,
    Sum,
    Mean,
    LogSumExp,
    Softmax,
    GlobalAvgPool,
    Reshape,
    Affine,
    Clamp,
}

impl OpKind {
    /// Every operation with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 19] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Conv2dTranspose,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::LogSumExp,
        OpKind::Softmax,
        OpKind::GlobalAvgPool,
        OpKind::Reshape,
        OpKind::Affine,
        OpKind::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv2dTranspose => "conv2d_transpose",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::LogSumExp => "logsumexp",
            OpKind::Softmax => "softmax",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Reshape => "reshape",
            OpKind::Affine => "affine",
            OpKind::Clamp => "clamp",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId, bias: bool },
    Sub { a: NodeId, b: NodeId, bias: bool },
    Mul { a: NodeId, b: NodeId, bias: bool },
    MatMul { a: NodeId, b: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeometry },
    Conv2dTranspose { input: NodeId, kernel: NodeId, geom: ConvGeometry },
    Relu(NodeId),
    LeakyRelu { a: NodeId, alpha: f64 },
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Sum { a: NodeId, axis: Option<usize> },
    Mean { a: NodeId, axis: Option<usize> },
    LogSumExp { a: NodeId, axis: Option<usize> },
    Softmax { a: NodeId, axis: usize },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    Affine { a: NodeId, scale: f64 },
    Clamp { a: NodeId, lo: f64, hi: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv2dTranspose { .. } => OpKind::Conv2dTranspose,
            Op::Relu(_) => OpKind::Relu,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::LogSumExp { .. } => OpKind::LogSumExp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Affine { .. } => OpKind::Affine,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    /// Whether any differentiable leaf feeds this node.
    tracked: bool,
}

/// Gradients of a scalar loss, keyed by the leaf nodes that were requested.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }
}

/// Append-only record of a forward computation.
///
/// Leaves are either variables (gradients requested) or constants. A node
/// can only reference earlier nodes, so the record is acyclic and a single
/// reverse sweep computes every gradient.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_shape(shape: &Shape, axis: Option<usize>, op: &str) -> Result<Shape> {
    match axis {
        None => Ok(Shape::scalar()),
        Some(ax) if ax < shape.rank() => Ok(shape.without_axis(ax)),
        Some(ax) => Err(Error::contract(format!(
            "{op}: axis {ax} out of range for shape {shape}"
        ))),
    }
}

fn axis_split(shape: &Shape, axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, shape.numel(), 1),
        Some(ax) => shape.split_at_axis(ax),
    }
}

fn slice_index(o: usize, j: usize, i: usize, len: usize, inner: usize) -> usize {
    (o * len + j) * inner + i
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Sums `g` over every axis but the last, the adjoint of a bias broadcast.
fn sum_to_bias<T: Real>(g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in g.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of one operation kind (scales its
    /// propagated gradient by 1.5). Used to prove the gradient checker
    /// catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        self.nodes[id.0].value.shape()
    }

    /// Leaf whose gradient can be requested from [`backward`](Self::backward).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let kind = op.kind();
        let value = Tensor::from_parts(shape, data);
        value.check_finite(kind.name())?;
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        Ok(self.push_unchecked(value, op, tracked))
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::contract(format!("unknown node {id:?}")));
        }
        Ok(())
    }

    /// Validates operands of an elementwise binary op; returns whether `b`
    /// is a rank-1 bias broadcast over the last axis of `a`.
    fn binary_layout(&self, op: &str, a: NodeId, b: NodeId) -> Result<bool> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sb.rank() == 1 && sa.rank() >= 1 && sb.numel() == sa.last() {
            return Ok(true);
        }
        Err(Error::contract(format!(
            "{op}: shape mismatch {sa} vs {sb} (only equal shapes or a rank-1 bias over the last axis are supported)"
        )))
    }

    fn binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(NodeId, NodeId, bool) -> Op,
    ) -> Result<NodeId> {
        let bias = self.binary_layout(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data: Vec<T> = if bias {
            let w = vb.len();
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % w]))
                .collect()
        } else {
            va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = va.shape().clone();
        self.push(shape, data, make(a, b, bias), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, |a, b, bias| Op::Add { a, b, bias })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, bias| Op::Sub { a, b, bias })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, bias| Op::Mul { a, b, bias })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (&[m, k], &[k2, n]) = (self.shape(a).dims(), self.shape(b).dims()) else {
            return Err(Error::contract(format!(
                "matmul: operands must be rank-2, got {} and {}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dimensions disagree, {} vs {}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Shape::new(vec![m, n])?, data, Op::MatMul { a, b }, &[a, b])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        self.check_id(input)?;
        self.check_id(kernel)?;
        let geom = ConvGeometry::for_conv(self.shape(input).dims(), self.shape(kernel).dims(), stride, padding)?;
        let data = geom.forward(self.value(input).data(), self.value(kernel).data());
        self.push(
            Shape::new(geom.small_dims().to_vec())?,
            data,
            Op::Conv2d { input, kernel, geom },
            &[input, kernel],
        )
    }

    /// Adjoint of [`conv2d`](Self::conv2d) under the same kernel, stride and
    /// padding. The kernel is laid out `k × k × out_channels × in_channels`.
    pub fn conv2d_transpose(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.check_id(input)?;
        self.check_id(kernel)?;
        let geom =
            ConvGeometry::for_transpose(self.shape(input).dims(), self.shape(kernel).dims(), stride, padding)?;
        let data = geom.adjoint(self.value(input).data(), self.value(kernel).data());
        self.push(
            Shape::new(geom.big_dims().to_vec())?,
            data,
            Op::Conv2dTranspose { input, kernel, geom },
            &[input, kernel],
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op) -> Result<NodeId> {
        self.check_id(a)?;
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().clone();
        self.push(shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let al = T::lit(alpha);
        self.unary(a, |x| if x > T::zero() { x } else { al * x }, Op::LeakyRelu { a, alpha })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, T::natural_exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= T::zero()) {
            return Err(Error::numeric("log", format!("non-positive input {bad}")));
        }
        self.unary(a, T::natural_log, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (s, t) = (T::lit(scale), T::lit(shift));
        self.unary(a, |x| s * x + t, Op::Affine { a, scale })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::contract(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp { a, lo, hi })
    }

    pub fn reshape(&mut self, a: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.check_id(a)?;
        let shape = Shape::new(dims)?;
        if shape.numel() != self.value(a).numel() {
            return Err(Error::contract(format!(
                "reshape: cannot view {} as {shape}",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let dims = self.shape(a).dims();
        let rows = dims.first().copied().unwrap_or(1);
        let cols = self.value(a).numel() / rows;
        self.reshape(a, vec![rows, cols])
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: NodeId, axis: Option<usize>, average: bool) -> Result<NodeId> {
        self.check_id(a)?;
        let name = if average { "mean" } else { "sum" };
        let shape = reduce_shape(self.shape(a), axis, name)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.value(a).data();
        let scale = if average { T::lit(1.0 / len as f64) } else { T::one() };
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for j in 0..len {
                    acc += x[slice_index(o, j, i, len, inner)];
                }
                data[o * inner + i] = acc * scale;
            }
        }
        let op = if average {
            Op::Mean { a, axis }
        } else {
            Op::Sum { a, axis }
        };
        self.push(shape, data, op, &[a])
    }

    /// `log Σ exp(x)` along an axis, evaluated with a max shift.
    pub fn logsumexp(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.check_id(a)?;
        let shape = reduce_shape(self.shape(a), axis, "logsumexp")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j| x[slice_index(o, j, i, len, inner)];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|j| (at(j) - m).natural_exp()).fold(T::zero(), |acc, v| acc + v);
                data[o * inner + i] = m + s.natural_log();
            }
        }
        self.push(shape, data, Op::LogSumExp { a, axis }, &[a])
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_id(a)?;
        reduce_shape(self.shape(a), Some(axis), "softmax")?;
        let shape = self.shape(a).clone();
        let (outer, len, inner) = shape.split_at_axis(axis);
        let x = self.value(a).data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j| slice_index(o, j, i, len, inner);
                let m = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - m).natural_exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[idx(j)] = data[idx(j)].quotient(z);
                }
            }
        }
        self.push(shape, data, Op::Softmax { a, axis }, &[a])
    }

    /// Spatial mean per channel: `b×h×w×c → b×c`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let &[b, h, w, c] = self.shape(a).dims() else {
            return Err(Error::contract(format!(
                "global_avg_pool: expected rank-4 input, got {}",
                self.shape(a)
            )));
        };
        let x = self.value(a).data();
        let inv = T::lit(1.0 / (h * w) as f64);
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            let out = &mut data[bi * c..(bi + 1) * c];
            for p in 0..h * w {
                let row = &x[(bi * h * w + p) * c..(bi * h * w + p + 1) * c];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        self.push(Shape::new(vec![b, c])?, data, Op::GlobalAvgPool(a), &[a])
    }

    /// Smallest |pre-activation| over every relu / leaky_relu node; `None`
    /// when the graph has no such node. Finite-difference checks use this to
    /// stay away from kinks.
    pub fn nearest_kink(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu { a, .. } => Some(a),
                _ => None,
            })
            .map(|a| {
                self.value(a)
                    .data()
                    .iter()
                    .map(|v| v.as_f64().abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .reduce(f64::min)
    }

    /// Reverse sweep from a scalar `loss`, returning ∂loss/∂w for every
    /// requested variable. Variables the loss does not depend on receive zeros.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<GradientMap<T>> {
        self.check_id(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {}",
                self.shape(loss)
            )));
        }
        for &w in wrt {
            self.check_id(w)?;
            let node = &self.nodes[w.0];
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                return Err(Error::contract(format!(
                    "backward: {w:?} is not a variable leaf"
                )));
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let k = T::lit(1.5);
                g.iter_mut().for_each(|v| *v *= k);
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = wrt
            .iter()
            .map(|&w| {
                let shape = self.shape(w).clone();
                let data = grads[..]
                    .get(w.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![T::zero(); shape.numel()]);
                (w, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, &d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add { a, b, bias } | Op::Sub { a, b, bias } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.tracked(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.tracked(b) {
                    let gb = if bias {
                        sum_to_bias(g, self.value(b).numel())
                    } else {
                        g.to_vec()
                    };
                    self.accumulate(grads, b, gb.into_iter().map(|v| v * sign).collect());
                }
            }
            Op::Mul { a, b, bias } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let w = vb.len();
                if self.tracked(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * if bias { vb[i % w] } else { vb[i] })
                        .collect();
                    self.accumulate(grads, a, ga);
                }
                if self.tracked(b) {
                    let prod: Vec<T> = g.iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                    let gb = if bias { sum_to_bias(&prod, w) } else { prod };
                    self.accumulate(grads, b, gb);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a).dims()[0], self.shape(a).dims()[1]);
                let n = self.shape(b).dims()[1];
                if self.tracked(a) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    self.accumulate(grads, a, matmul_raw(g, &bt, m, n, k));
                }
                if self.tracked(b) {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    self.accumulate(grads, b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.tracked(input) {
                    self.accumulate(grads, input, geom.adjoint(g, self.value(kernel).data()));
                }
                if self.tracked(kernel) {
                    self.accumulate(grads, kernel, geom.kernel_grad(self.value(input).data(), g));
                }
            }
            Op::Conv2dTranspose { input, kernel, geom } => {
                if self.tracked(input) {
                    self.accumulate(grads, input, geom.forward(g, self.value(kernel).data()));
                }
                if self.tracked(kernel) {
                    self.accumulate(grads, kernel, geom.kernel_grad(g, self.value(input).data()));
                }
            }
            Op::Relu(a) => {
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::LeakyRelu { a, alpha } => {
                let al = T::lit(alpha);
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { al * gi })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                self.accumulate(grads, a, d);
            }
            Op::Log(a) => {
                let x = self.value(a).data();
                let d = g.iter().zip(x).map(|(&gi, &xi)| gi.quotient(xi)).collect();
                self.accumulate(grads, a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Affine { a, scale } => {
                let s = T::lit(scale);
                self.accumulate(grads, a, g.iter().map(|&gi| gi * s).collect());
            }
            Op::Clamp { a, lo, hi } => {
                let (l, h) = (T::lit(lo), T::lit(hi));
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= l && xi <= h { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let shape = self.shape(a);
                let (outer, len, inner) = axis_split(shape, axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::lit(1.0 / len as f64)
                } else {
                    T::one()
                };
                let mut d = vec![T::zero(); shape.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i] * scale;
                        for j in 0..len {
                            d[slice_index(o, j, i, len, inner)] = gv;
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LogSumExp { a, axis } => {
                let shape = self.shape(a);
                let x = self.value(a).data();
                let (outer, len, inner) = axis_split(shape, axis);
                let mut d = vec![T::zero(); shape.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (gv, lse) = (g[o * inner + i], y[o * inner + i]);
                        for j in 0..len {
                            let p = slice_index(o, j, i, len, inner);
                            d[p] = gv * (x[p] - lse).natural_exp();
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = self.shape(a).split_at_axis(axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j| slice_index(o, j, i, len, inner);
                        let dotp: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).fold(T::zero(), |acc, v| acc + v);
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::GlobalAvgPool(a) => {
                let &[b, h, w, c] = self.shape(a).dims() else {
                    unreachable!("validated in forward")
                };
                let inv = T::lit(1.0 / (h * w) as f64);
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    let gr = &g[bi * c..(bi + 1) * c];
                    for p in 0..h * w {
                        let row = &mut d[(bi * h * w + p) * c..(bi * h * w + p + 1) * c];
                        for (o, &gv) in row.iter_mut().zip(gr) {
                            *o = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one().quotient(T::one() + (-x).natural_exp())
    } else {
        let e = x.natural_exp();
        e.quotient(T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sub_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.sub(a, a).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn bias_broadcast_and_its_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.variable(t(&[3], &[10.0, 20.0, 30.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = g.sum(y, None).unwrap();
        let grads = g.backward(l, &[b]).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[0.0; 4]));
        let b = g.constant(t(&[3], &[0.0; 3]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2×2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let bb = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let p = g.matmul(i, bb).unwrap();
        assert_eq!(g.value(p).data(), g.value(bb).data());
        let bad = g.constant(t(&[3, 1], &[0.0; 3]));
        assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn relu_and_leaky() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = g.constant(t(&[1], &[-10.0]));
        let l = g.leaky_relu(y, 0.2).unwrap();
        assert_eq!(g.value(l).data(), &[-2.0]);
    }

    #[test]
    fn subgradients_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[0.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r, None).unwrap();
        assert_eq!(g.backward(l, &[x]).unwrap().get(x).unwrap().data(), &[0.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[0.0]));
        let r = g.leaky_relu(x, 0.2).unwrap();
        let l = g.sum(r, None).unwrap();
        assert_eq!(g.backward(l, &[x]).unwrap().get(x).unwrap().data(), &[0.2]);
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.logsumexp(x, None).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let l = g.logsumexp(x, Some(0)).unwrap();
        assert!((g.value(l).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);

        let mut g32 = Graph::<f32>::new();
        let x = g32.constant(Tensor::new(vec![1, 3], vec![90.0f32, 89.0, 88.0]).unwrap());
        let l = g32.logsumexp(x, Some(1)).unwrap();
        assert!(g32.value(l).is_finite());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, Error::Numeric { op: "log", .. }), "{err}");
    }

    #[test]
    fn exp_overflow_is_a_numeric_fault() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1], vec![100.0f32]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::Numeric { op: "exp", .. })));
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        for (got, want) in g.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let c = g.constant(t(&[3], &[7.5; 3]));
        let s = g.softmax(c, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn global_avg_pool_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).dims(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[2.5]);
        let c = g.constant(Tensor::full(vec![2, 3, 3, 2], 0.7).unwrap());
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[0.5, -1.0, 2.0]));
        let l = g.sum(x, None).unwrap();
        assert_eq!(g.backward(l, &[x]).unwrap().get(x).unwrap().data(), &[1.0; 3]);

        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq, None).unwrap();
        assert_eq!(g.backward(l, &[x]).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_constants() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, c).unwrap();
        assert!(matches!(g.backward(y, &[x]), Err(Error::Contract(_))));
        let l = g.sum(y, None).unwrap();
        assert!(g.backward(l, &[c]).is_err());
    }

    #[test]
    fn unreachable_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let unused = g.variable(t(&[2, 2], &[1.0; 4]));
        let l = g.sum(x, None).unwrap();
        let grads = g.backward(l, &[x, unused]).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get(unused).unwrap().dims(), &[2, 2]);
    }

    #[test]
    fn conv_identity_kernel_and_full_window() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let x = g.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[2, 2, 1, 1], &[1.0; 4]));
        let y = g.conv2d(x, k, 2, Padding::Valid).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn transpose_unit_kernel_places_value_top_left() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d_transpose(x, k, 2, Padding::Same).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 2, 2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fault_injection_corrupts_only_the_named_op() {
        let build = |fault: Option<OpKind>| {
            let mut g = Graph::new();
            if let Some(k) = fault {
                g.inject_fault(k);
            }
            let x = g.variable(t(&[2], &[1.0, 2.0]));
            let e = g.exp(x).unwrap();
            let l = g.sum(e, None).unwrap();
            g.backward(l, &[x]).unwrap().get(x).unwrap().clone()
        };
        let clean = build(None);
        assert_eq!(build(Some(OpKind::Relu)), clean);
        let bad = build(Some(OpKind::Exp));
        assert!((bad.data()[0] - 1.5 * clean.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
