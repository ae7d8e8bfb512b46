// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use super::array::Array;
use crate::error::{Error, Result};
use crate::matcore::{exp_squarings, EXP_TAYLOR_ORDER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive recorded on the tape. Parents always precede the node.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product; either side may be a one-element scalar.
    Mul(NodeId, NodeId),
    /// `[.., F] + [F]`.
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Reduces the last axis.
    SumRows(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    /// Row-wise `softmax(x / τ)` over the last axis.
    Softmax(NodeId, f64),
    LogSoftmax(NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    FrobeniusSq(NodeId),
    /// `Σ softplus(z) − x·z` over all entries.
    BceWithLogits(NodeId, NodeId),
    /// Identity in the forward pass; blocks the adjoint.
    StopGradient(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add-row-bias",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum-rows",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log-softmax",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::FrobeniusSq(..) => "frobenius-sq",
            Op::BceWithLogits(..) => "bce-with-logits",
            Op::StopGradient(..) => "stop-gradient",
        }
    }

    /// Nodes this op reads.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::MatMul(a, b)
            | Op::BceWithLogits(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a)
            | Op::Reshape(a, _)
            | Op::FrobeniusSq(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    name: Option<String>,
}

/// Define-by-run computation graph. Each builder call evaluates its node
/// immediately; [`Graph::forward`] replays the recorded tape with new leaf
/// values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, NodeId>,
}

/// Adjoints from [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    named: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros if the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Array {
        match &self.adjoints[id.0] {
            Some(a) => a.clone(),
            None => Array::zeros(&self.shapes[id.0]),
        }
    }

    /// Gradients of every named leaf, keyed by name.
    pub fn named(&self) -> BTreeMap<String, Array> {
        self.named
            .iter()
            .map(|(name, id)| (name.clone(), self.get(*id)))
            .collect()
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
    }

    pub fn named_leaves(&self) -> BTreeMap<String, NodeId> {
        self.named.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    /// Unnamed leaf (data, noise, constants).
    pub fn input(&mut self, value: Array) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.input(value)
    }

    /// Named leaf; a second request for the same name returns the first node.
    pub fn named_input(&mut self, name: &str, value: impl FnOnce() -> Array) -> NodeId {
        if let Some(id) = self.named.get(name) {
            return *id;
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value(),
            name: Some(name.to_string()),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.named.insert(name.to_string(), id);
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = eval(&op, &self.nodes).map_err(|e| annotate(e, index, &op))?;
        self.nodes.push(Node {
            op,
            value,
            name: None,
        });
        Ok(NodeId(index))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRowBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::invalid(format!("softmax temperature {temperature}")));
        }
        self.push(Op::Softmax(a, temperature))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            src,
            axis,
            start,
            len,
        })
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::FrobeniusSq(a))
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.push(Op::BceWithLogits(logits, target))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient(a))
    }

    /// `[rows, in] · [in, out] + [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    /// Matrix exponential of `[n,n]` or batched `[b,n,n]`, unrolled into
    /// scale/matmul/add nodes. The number of squarings is fixed from the
    /// current values (largest Frobenius norm in the batch) and baked into
    /// the tape.
    pub fn mat_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let (batch, n) = match shape.as_slice() {
            [r, c] if r == c => (None, *r),
            [b, r, c] if r == c => (Some(*b), *r),
            _ => return Err(Error::dim(format!("mat_exp of shape {shape:?}"))),
        };
        let stride = n * n;
        let max_norm = self
            .value(a)
            .data()
            .chunks(stride)
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        let s = exp_squarings(max_norm);
        let eye = self.constant(Array::identity(n, batch));
        let x = self.scale(a, 0.5f64.powi(s as i32))?;
        let mut p = eye;
        for k in (1..=EXP_TAYLOR_ORDER).rev() {
            let xp = self.matmul(x, p)?;
            let term = self.scale(xp, 1.0 / k as f64)?;
            p = self.add(eye, term)?;
        }
        for _ in 0..s {
            p = self.matmul(p, p)?;
        }
        Ok(p)
    }

    /// Replays the tape after rebinding leaves. Structure (including the
    /// squaring counts baked by [`Graph::mat_exp`]) is kept.
    pub fn forward(&mut self, bindings: &[(NodeId, Array)]) -> Result<()> {
        for (id, value) in bindings {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or_else(|| Error::invalid(format!("unknown node #{}", id.0)))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::invalid(format!("node #{} is not an input", id.0)));
            }
            if node.value.shape() != value.shape() {
                return Err(Error::dim(format!(
                    "node #{} bound with shape {:?}, expected {:?}",
                    id.0,
                    value.shape(),
                    node.value.shape()
                )));
            }
            node.value = value.clone();
        }
        self.recompute()
    }

    pub(crate) fn set_leaf_entry(&mut self, id: NodeId, index: usize, v: f64) {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].value.data_mut()[index] = v;
    }

    pub(crate) fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = eval(&self.nodes[i].op, &self.nodes[..i])
                .map_err(|e| annotate(e, i, &self.nodes[i].op))?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar node #{} of shape {:?}",
                output.0,
                out.value.shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Array::filled(out.value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            named: self.named_leaves(),
        })
    }

    fn propagate(&self, op: &Op, y: &Array, g: &Array, adj: &mut [Option<Array>]) {
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, contribution: Array| match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if va.len() == vb.len() && va.shape() == vb.shape() {
                    acc(*a, zip(g, vb, |g, b| g * b));
                    acc(*b, zip(g, va, |g, a| g * a));
                } else if vb.len() == 1 {
                    let s = vb.item();
                    acc(*a, g.map(|v| v * s));
                    let ds = dot(g.data(), va.data());
                    acc(*b, Array::filled(vb.shape(), ds));
                } else {
                    let s = va.item();
                    acc(*b, g.map(|v| v * s));
                    let ds = dot(g.data(), vb.data());
                    acc(*a, Array::filled(va.shape(), ds));
                }
            }
            Op::AddRowBias(a, bias) => {
                acc(*a, g.clone());
                let cols = val(bias).len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, Array::new(val(bias).shape().to_vec(), db).unwrap());
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape()).unwrap();
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let ga = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let a_s = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &vb.data()[bi * k * n..(bi + 1) * k * n];
                    // dA = G·Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        ga,
                        (n, 1),
                        b_s,
                        (1, n),
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                    // dB = Aᵀ·G
                    gemm(
                        k,
                        m,
                        n,
                        a_s,
                        (1, k),
                        ga,
                        (n, 1),
                        &mut db[bi * k * n..(bi + 1) * k * n],
                    );
                }
                acc(*a, Array::new(va.shape().to_vec(), da).unwrap());
                acc(*b, Array::new(vb.shape().to_vec(), db).unwrap());
            }
            Op::Sum(a) => acc(*a, Array::filled(val(a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(*a, Array::filled(val(a).shape(), g.item() / n));
            }
            Op::SumRows(a) => {
                let va = val(a);
                let cols = va.last_dim();
                let mut d = vec![0.0; va.len()];
                for (r, chunk) in d.chunks_mut(cols).enumerate() {
                    chunk.fill(g.data()[r]);
                }
                acc(*a, Array::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Exp(a) => acc(*a, zip(g, y, |g, y| g * y)),
            Op::Log(a) => acc(*a, zip(g, val(a), |g, x| g / x)),
            Op::Tanh(a) => acc(*a, zip(g, y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, zip(g, y, |g, y| g * y * (1.0 - y))),
            Op::Relu(a) => acc(*a, zip(g, val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Square(a) => acc(*a, zip(g, val(a), |g, x| 2.0 * x * g)),
            Op::Sqrt(a) => acc(
                *a,
                zip(g, y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                zip(g, val(a), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
            ),
            Op::Softmax(a, tau) => {
                let cols = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let s = dot(gr, yr);
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - s) / tau;
                    }
                }
                acc(*a, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmax(a) => {
                let cols = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let s: f64 = gr.iter().sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - yv.exp() * s;
                    }
                }
                acc(*a, Array::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(a, _) => acc(*a, g.clone().reshaped(val(a).shape()).unwrap()),
            Op::Concat(parts, axis) => {
                let (outer, inner) = outer_inner(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let vp = val(p);
                    let len = vp.shape()[*axis];
                    let mut d = Vec::with_capacity(vp.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    acc(*p, Array::new(vp.shape().to_vec(), d).unwrap());
                    offset += len;
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let vs = val(src);
                let (outer, inner) = outer_inner(vs.shape(), *axis);
                let full = vs.shape()[*axis];
                let mut d = vec![0.0; vs.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let from = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                acc(*src, Array::new(vs.shape().to_vec(), d).unwrap());
            }
            Op::FrobeniusSq(a) => {
                let s = g.item();
                acc(*a, val(a).map(|x| 2.0 * x * s));
            }
            Op::StopGradient(_) => {}
            Op::BceWithLogits(z, x) => {
                let s = g.item();
                let (vz, vx) = (val(z), val(x));
                acc(*z, zip(vz, vx, |z, x| s * (sigmoid(z) - x)));
                acc(*x, vz.map(|z| -s * z));
            }
        }
    }
}

fn annotate(e: Error, index: usize, op: &Op) -> Error {
    match e {
        Error::Dimension(msg) => Error::Dimension(format!("node #{index} ({}): {msg}", op.kind())),
        other => other,
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::dim(format!("matmul of {a:?} and {b:?}"))),
    }
}

/// `C[m,n] = A[m,k]·B[k,n]` with explicit (row, col) strides for A and B;
/// `c` is overwritten and contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f64],
) {
    if m * k * n <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * a_rs + l * a_cs] * b[l * b_rs + j * b_cs];
                }
                c[i * n + j] = s;
            }
        }
        return;
    }
    // SAFETY: slices cover every index addressed by the given dims/strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Array> {
    let val = |id: &NodeId| -> Result<&Array> {
        nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::invalid(format!("parent #{} not yet defined", id.0)))
    };
    let same = |a: &Array, b: &Array| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    };
    Ok(match op {
        Op::Leaf => return Err(Error::invalid("leaf has no rule")),
        Op::Add(a, b) => {
            let (va, vb) = (val(a)?, val(b)?);
            same(va, vb)?;
            zip(va, vb, |x, y| x + y)
        }
        Op::Sub(a, b) => {
            let (va, vb) = (val(a)?, val(b)?);
            same(va, vb)?;
            zip(va, vb, |x, y| x - y)
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a)?, val(b)?);
            if va.shape() == vb.shape() {
                zip(va, vb, |x, y| x * y)
            } else if vb.len() == 1 {
                let s = vb.item();
                va.map(|x| x * s)
            } else if va.len() == 1 {
                let s = va.item();
                vb.map(|x| x * s)
            } else {
                same(va, vb)?;
                unreachable!()
            }
        }
        Op::AddRowBias(a, bias) => {
            let (va, vb) = (val(a)?, val(bias)?);
            let cols = va.last_dim();
            if vb.len() != cols || va.shape().is_empty() {
                return Err(Error::dim(format!(
                    "row bias {:?} for {:?}",
                    vb.shape(),
                    va.shape()
                )));
            }
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, b) in row.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::Scale(a, c) => val(a)?.map(|x| x * c),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a)?, val(b)?);
            let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    (k, 1),
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    (n, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let shape = if va.shape().len() == 2 {
                vec![m, n]
            } else {
                vec![batch, m, n]
            };
            Array::new(shape, out)?
        }
        Op::Sum(a) => Array::scalar(compensated_sum(val(a)?.data().iter().copied())),
        Op::Mean(a) => {
            let va = val(a)?;
            Array::scalar(compensated_sum(va.data().iter().copied()) / va.len() as f64)
        }
        Op::SumRows(a) => {
            let va = val(a)?;
            if va.shape().is_empty() {
                return Err(Error::dim("sum-rows of a scalar"));
            }
            let cols = va.last_dim();
            let sums = va
                .data()
                .chunks(cols)
                .map(|r| compensated_sum(r.iter().copied()))
                .collect();
            Array::new(va.shape()[..va.shape().len() - 1].to_vec(), sums)?
        }
        Op::Exp(a) => val(a)?.map(f64::exp),
        Op::Log(a) => val(a)?.map(f64::ln),
        Op::Tanh(a) => val(a)?.map(f64::tanh),
        Op::Sigmoid(a) => val(a)?.map(sigmoid),
        Op::Relu(a) => val(a)?.map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Square(a) => val(a)?.map(|x| x * x),
        Op::Sqrt(a) => val(a)?.map(f64::sqrt),
        Op::Clamp(a, lo, hi) => val(a)?.map(|x| x.clamp(*lo, *hi)),
        Op::Softmax(a, tau) => {
            let va = val(a)?;
            let cols = va.last_dim();
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = ((*v - max) / tau).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            out
        }
        Op::LogSoftmax(a) => {
            let va = val(a)?;
            let cols = va.last_dim();
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        }
        Op::Reshape(a, shape) => val(a)?.clone().reshaped(shape)?,
        Op::Concat(parts, axis) => {
            let first = val(parts
                .first()
                .ok_or_else(|| Error::invalid("empty concat"))?)?;
            let rank = first.shape().len();
            if *axis >= rank {
                return Err(Error::dim(format!("concat axis {axis} of rank {rank}")));
            }
            let mut total = 0;
            for p in parts {
                let s = val(p)?.shape();
                let compatible = s.len() == rank
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == *axis || x == y);
                if !compatible {
                    return Err(Error::dim(format!(
                        "concat {:?} with {:?} on axis {axis}",
                        first.shape(),
                        s
                    )));
                }
                total += s[*axis];
            }
            let (outer, inner) = outer_inner(first.shape(), *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let vp = val(p)?;
                    let len = vp.shape()[*axis] * inner;
                    data.extend_from_slice(&vp.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Array::new(shape, data)?
        }
        Op::Slice {
            src,
            axis,
            start,
            len,
        } => {
            let vs = val(src)?;
            let shape = vs.shape();
            if *axis >= shape.len() || start + len > shape[*axis] || *len == 0 {
                return Err(Error::dim(format!(
                    "slice [{start}, {}) on axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let (outer, inner) = outer_inner(shape, *axis);
            let full = shape[*axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * full + start) * inner;
                data.extend_from_slice(&vs.data()[from..from + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[*axis] = *len;
            Array::new(out_shape, data)?
        }
        Op::FrobeniusSq(a) => Array::scalar(compensated_sum(val(a)?.data().iter().map(|v| v * v))),
        Op::StopGradient(a) => val(a)?.clone(),
        Op::BceWithLogits(z, x) => {
            let (vz, vx) = (val(z)?, val(x)?);
            same(vz, vx)?;
            Array::scalar(compensated_sum(
                vz.data()
                    .iter()
                    .zip(vx.data())
                    .map(|(z, x)| softplus(*z) - x * z),
            ))
        }
    })
}

/// Neumaier summation. Loss reductions run over thousands of terms, and
/// finite-difference checks difference two such sums.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}
