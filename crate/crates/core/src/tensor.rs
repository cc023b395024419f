//! Dense row-major `f64` tensors and a single-use reverse-mode graph.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backpropagate`] on a scalar node walks the record backwards and
//! returns the gradient of that scalar with respect to every parameter node.
//! Graphs are rebuilt for each forward/backward pass.
//!
//! Operations that act "along the last axis" (softmax, concat, slice) treat a
//! tensor of shape `[d0, .., dk]` as a matrix with `d0 * .. * d(k-1)` rows and
//! `dk` columns.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: numeric overflow (non-finite value in result)")]
    NumericOverflow { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} must be a non-empty list of positive sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor shape {shape:?} has no elements");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Copies the rows selected by `indices` (leading axis of a matrix view).
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![indices.len(), c],
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations a [`Graph`] can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise; the right operand may omit the leading axis of the left.
    Add,
    Sub,
    Mul,
    /// Concatenation of any number of inputs along the last axis.
    Concat,
    /// Columns `start..start + len` of the last axis.
    Slice { start: usize, len: usize },
    Relu,
    Softmax,
    /// Log-softmax along the last axis, computed with max subtraction.
    LogSoftmax,
    Log,
    Square,
    Abs,
    Scale(f64),
    Reshape(Vec<usize>),
    /// Mean of all entries, shape `[1]`.
    Mean,
    /// Sum of all entries, shape `[1]`.
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Log => "log",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Scale(_) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Mean => "mean",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Constant,
    Parameter,
    Op(Op),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only operation record; node inputs always refer to earlier nodes.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to each parameter node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
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

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Parameter, Vec::new(), value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Parameter))
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Applies `op` to `inputs` and appends the result as a new node.
    pub fn evaluate(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(TensorError::UnknownNode(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward(&op, &values)?;
        if !out.is_finite() {
            return Err(TensorError::NumericOverflow { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), out, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.evaluate(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.evaluate(Op::Concat, parts)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.evaluate(Op::Slice { start, len }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Relu, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::LogSoftmax, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Log, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Square, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Abs, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.evaluate(Op::Scale(factor), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.evaluate(Op::Reshape(shape), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.evaluate(Op::Sum, &[a])
    }

    /// Reverse sweep from a scalar node. Parameters the loss does not depend
    /// on receive a zero gradient.
    pub fn backpropagate(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let op = match &node.kind {
                NodeKind::Op(op) => op,
                NodeKind::Parameter => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                NodeKind::Constant => continue,
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].needs_grad).collect();
            let local = backward(op, &inputs, &node.value, &upstream, &wanted);
            for ((input, g), want) in node.inputs.iter().zip(local).zip(wanted) {
                if !want {
                    continue;
                }
                let g = g.expect("backward produced a gradient for every wanted input");
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = None;
        }

        let mut by_param = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Parameter) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_param.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { by_param })
    }
}

fn mismatch(op: &Op, inputs: &[&Tensor]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape.clone()).collect(),
    }
}

fn expect_arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(TensorError::Invalid(format!(
            "{} takes {n} input(s), got {}",
            op.name(),
            inputs.len()
        )))
    }
}

/// `true` when `b` is broadcast over the leading axis of `a`.
fn broadcast_kind(op: &Op, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape == b.shape {
        Ok(false)
    } else if a.shape.len() >= 2 && a.shape[1..] == b.shape[..] {
        Ok(true)
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = b.data.len();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % n]))
        .collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a [m, n] x b^T` where `b` is `[k, n]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x b` where `a` is `[m, k]` and `b` is `[m, n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(t.data.len());
    for row in t.data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(t.data.len());
    for row in t.data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - max - log_total));
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch(op, inputs));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Ok(Tensor {
                shape: vec![m, n],
                data: matmul_raw(&a.data, &b.data, m, k, n),
            })
        }
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            broadcast_kind(op, a, b)?;
            Ok(match op {
                Op::Add => elementwise(a, b, |x, y| x + y),
                Op::Sub => elementwise(a, b, |x, y| x - y),
                _ => elementwise(a, b, |x, y| x * y),
            })
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::Invalid("concat needs at least one input".into()));
            }
            let lead = &inputs[0].shape[..inputs[0].shape.len() - 1];
            if inputs
                .iter()
                .any(|t| t.shape.len() != lead.len() + 1 || &t.shape[..lead.len()] != lead)
            {
                return Err(mismatch(op, inputs));
            }
            let rows = inputs[0].rows();
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Ok(Tensor { shape, data })
        }
        Op::Slice { start, len } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if *len == 0 || start + len > a.cols() {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    shapes: vec![a.shape.clone(), vec![*start, *len]],
                });
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[*start..start + len]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = *len;
            Ok(Tensor { shape, data })
        }
        Op::Relu => unary(op, inputs, |v| v.max(0.0)),
        Op::Log => unary(op, inputs, f64::ln),
        Op::Square => unary(op, inputs, |v| v * v),
        Op::Abs => unary(op, inputs, f64::abs),
        Op::Scale(c) => unary(op, inputs, |v| v * c),
        Op::Softmax => {
            expect_arity(op, inputs, 1)?;
            Ok(softmax_rows(inputs[0]))
        }
        Op::LogSoftmax => {
            expect_arity(op, inputs, 1)?;
            Ok(log_softmax_rows(inputs[0]))
        }
        Op::Reshape(shape) => {
            expect_arity(op, inputs, 1)?;
            Tensor::new(shape.clone(), inputs[0].data.clone()).map_err(|_| TensorError::ShapeMismatch {
                op: op.name(),
                shapes: vec![inputs[0].shape.clone(), shape.clone()],
            })
        }
        Op::Mean => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            Ok(Tensor::scalar(a.sum() / a.len() as f64))
        }
        Op::Sum => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
    }
}

fn unary(op: &Op, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<Tensor> {
    expect_arity(op, inputs, 1)?;
    Ok(inputs[0].map(f))
}

/// Sums a full-shape gradient over the leading axis, producing the shape of
/// a broadcast operand.
fn reduce_leading(g: &Tensor, target: &[usize]) -> Tensor {
    let n: usize = target.iter().product();
    let mut data = vec![0.0; n];
    for (i, v) in g.data.iter().enumerate() {
        data[i % n] += v;
    }
    Tensor {
        shape: target.to_vec(),
        data,
    }
}

/// Local vector-Jacobian products for each input of `op`.
fn backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let same_shape = |t: &Tensor, data: Vec<f64>| Tensor {
        shape: t.shape.clone(),
        data,
    };
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let ga = wanted[0].then(|| same_shape(a, matmul_nt(&g.data, &b.data, m, n, k)));
            let gb = wanted[1].then(|| same_shape(b, matmul_tn(&a.data, &g.data, m, k, n)));
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = b.data.len();
            let ga = wanted[0].then(|| match op {
                Op::Mul => same_shape(a, g.data.iter().enumerate().map(|(i, v)| v * b.data[i % n]).collect()),
                _ => g.clone(),
            });
            let gb = wanted[1].then(|| {
                let full = match op {
                    Op::Add => g.clone(),
                    Op::Sub => g.map(|v| -v),
                    _ => same_shape(a, g.data.iter().zip(&a.data).map(|(v, x)| v * x).collect()),
                };
                if b.shape == a.shape {
                    full
                } else {
                    reduce_leading(&full, &b.shape)
                }
            });
            vec![ga, gb]
        }
        Op::Concat => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            inputs
                .iter()
                .zip(wanted)
                .map(|(t, &w)| {
                    let c = t.cols();
                    let part = w.then(|| {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total + offset;
                            data.extend_from_slice(&g.data[base..base + c]);
                        }
                        same_shape(t, data)
                    });
                    offset += c;
                    part
                })
                .collect()
        }
        Op::Slice { start, len } => {
            let a = inputs[0];
            let c = a.cols();
            let mut data = vec![0.0; a.data.len()];
            for r in 0..a.rows() {
                data[r * c + start..r * c + start + len].copy_from_slice(&g.data[r * len..(r + 1) * len]);
            }
            vec![Some(same_shape(a, data))]
        }
        Op::Relu => {
            let a = inputs[0];
            let data = a
                .data
                .iter()
                .zip(&g.data)
                .map(|(&x, &v)| if x > 0.0 { v } else { 0.0 })
                .collect();
            vec![Some(same_shape(a, data))]
        }
        Op::Log => {
            let a = inputs[0];
            vec![Some(same_shape(a, g.data.iter().zip(&a.data).map(|(v, x)| v / x).collect()))]
        }
        Op::Square => {
            let a = inputs[0];
            vec![Some(same_shape(a, g.data.iter().zip(&a.data).map(|(v, x)| 2.0 * x * v).collect()))]
        }
        Op::Abs => {
            // Subgradient at exactly zero is 0.
            let a = inputs[0];
            let data = g
                .data
                .iter()
                .zip(&a.data)
                .map(|(v, &x)| {
                    if x > 0.0 {
                        *v
                    } else if x < 0.0 {
                        -v
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(same_shape(a, data))]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::Softmax => {
            let c = out.cols();
            let mut data = Vec::with_capacity(out.data.len());
            for (y, gy) in out.data.chunks(c).zip(g.data.chunks(c)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                data.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
            }
            vec![Some(same_shape(out, data))]
        }
        Op::LogSoftmax => {
            let c = out.cols();
            let mut data = Vec::with_capacity(out.data.len());
            for (y, gy) in out.data.chunks(c).zip(g.data.chunks(c)) {
                let total: f64 = gy.iter().sum();
                data.extend(y.iter().zip(gy).map(|(yi, gi)| gi - yi.exp() * total));
            }
            vec![Some(same_shape(out, data))]
        }
        Op::Reshape(_) => vec![Some(same_shape(inputs[0], g.data.clone()))],
        Op::Mean => {
            let a = inputs[0];
            let v = g.data[0] / a.len() as f64;
            vec![Some(Tensor::filled(&a.shape, v))]
        }
        Op::Sum => vec![Some(Tensor::filled(&inputs[0].shape, g.data[0]))],
    }
}

/// Central-difference step used by [`gradient_check`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-6;

/// Compares analytic gradients of a scalar graph with central differences.
///
/// `builder` receives a fresh graph and one parameter node per tensor in
/// `point` and must return a scalar node. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates.
pub fn gradient_check_tensors<F>(point: &[Tensor], builder: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |params: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| graph.parameter(t.clone())).collect();
        let loss = builder(&mut graph, &ids)?;
        let value = graph.value(loss);
        if value.len() != 1 {
            return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
        }
        if !value.is_finite() {
            return Err(TensorError::NumericOverflow { op: "loss" });
        }
        Ok((graph, ids, loss))
    };

    let (graph, ids, loss) = eval(point)?;
    let grads = graph.backpropagate(loss)?;
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every parameter has a gradient");
        for j in 0..point[t].len() {
            let original = point[t].data[j];
            probe[t].data[j] = original + GRADIENT_CHECK_STEP;
            let (gp, _, lp) = eval(&probe)?;
            probe[t].data[j] = original - GRADIENT_CHECK_STEP;
            let (gm, _, lm) = eval(&probe)?;
            probe[t].data[j] = original;
            let numeric = (gp.value(lp).data[0] - gm.value(lm).data[0]) / (2.0 * GRADIENT_CHECK_STEP);
            let a = analytic.data[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`gradient_check_tensors`] for a single flat parameter vector.
pub fn gradient_check<F>(point: &[f64], builder: F) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let flat = Tensor::vector(point.to_vec())?;
    gradient_check_tensors(&[flat], |g, ids| builder(g, ids[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let a = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 0.25, 7.0, 8.0]).unwrap();
        let i = g.constant(Tensor::identity(3));
        let x = g.constant(a.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.5, 4.0, 0.01, -0.7]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.5, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let z = g.matmul(x, y).unwrap();
        for (got, want) in g.value(z).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_last_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.0]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert_eq!(g.log(a).unwrap_err(), TensorError::NumericOverflow { op: "log" });
    }

    #[test]
    fn relu_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backpropagate(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_no_parameter_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = g.sum(c).unwrap();
        assert!(g.backpropagate(s).unwrap().is_empty());
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::vector(vec![5.0, 6.0]).unwrap());
        let c = g.constant(Tensor::vector(vec![1.0]).unwrap());
        let s = g.sum(c).unwrap();
        let grads = g.backpropagate(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::vector(vec![5.0, 6.0]).unwrap());
        assert_eq!(g.backpropagate(p).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn backpropagate_leaves_forward_values_untouched() {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::vector(vec![0.5, -1.5]).unwrap());
        let q = g.square(p).unwrap();
        let s = g.sum(q).unwrap();
        let before: Vec<Tensor> = (0..g.len()).map(|i| g.value(NodeId(i)).clone()).collect();
        g.backpropagate(s).unwrap();
        let after: Vec<Tensor> = (0..g.len()).map(|i| g.value(NodeId(i)).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn quadratic_gradient_check() {
        let err = gradient_check(&[1.0, 2.0, 3.0], |g, theta| {
            let sq = g.square(theta)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_gradient_check_is_exact() {
        let err = gradient_check(&[1.0, 2.0], |g, _theta| {
            let c = g.constant(Tensor::scalar(3.0));
            g.sum(c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradient_check_rejects_non_finite_loss() {
        let res = gradient_check(&[0.0], |g, theta| {
            let l = g.log(theta)?;
            g.sum(l)
        });
        assert!(matches!(res, Err(TensorError::NumericOverflow { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]).unwrap());
        let s = g.softmax(x).unwrap();
        for r in 0..2 {
            let total: f64 = g.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(g.value(s).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_over_batch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.parameter(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backpropagate(s).unwrap().get(b).unwrap().data(), &[3.0, 3.0]);
    }
}
