//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in call
//! order. Because an operation can only consume nodes that already exist,
//! record order is a topological order and [`Graph::backward`] simply walks
//! the tape in reverse. A graph supports exactly one backward pass.
//!
//! Broadcasting is limited to two cases: operands of identical shape, or one
//! operand holding a single element.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, split_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Kinds accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Abs,
    Relu,
    Scale,
}

/// Second operand of a binary [`elementwise`] call.
#[derive(Clone, Copy)]
pub enum Operand<'g> {
    Var(Var<'g>),
    Scalar(f64),
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reduce { x: NodeId, kind: ReduceKind, axis: usize },
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Transpose(NodeId),
    Narrow { x: NodeId, axis: usize, start: usize },
    AddBias { x: NodeId, bias: NodeId },
    ShiftRows { x: NodeId, by: usize },
    Reshape(NodeId),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for a single forward/backward pair.
///
/// Not `Sync`: build one graph per thread. Values are `Arc`-shared so leaf
/// tensors can be borrowed from a parameter store without copying.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes.borrow()[id.0].value.clone()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    /// Sign of every input element of every kinked operation (ReLU, abs),
    /// in record order. Two evaluations of the same program that produce the
    /// same signature lie in the same linear piece of those operations.
    pub fn kink_signature(&self) -> Vec<i8> {
        let nodes = self.nodes.borrow();
        let mut sig = Vec::new();
        for node in nodes.iter() {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                sig.extend(nodes[x.0].value.data().iter().map(|&v| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Usage("loss belongs to a different graph".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Usage("graph already consumed by a backward pass".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id.0].value;
        if loss_value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.id.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn reduce_to_single(grad: &Tensor, shape: &[usize]) -> Tensor {
    Tensor::from_parts(shape.to_vec(), vec![grad.sum()])
}

fn backprop_node(nodes: &[Node], node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
    let needs = |id: NodeId| nodes[id.0].needs_grad;
    let val = |id: NodeId| &nodes[id.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matmul lhs");
            let n = val(*b).shape()[1];
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, grad.data(), false, val(*b).data(), true, &mut da, false);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, grad.data(), false, &mut db, false);
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                let g = if val(*a).shape() == grad.shape() {
                    grad.clone()
                } else {
                    reduce_to_single(grad, val(*a).shape())
                };
                accumulate(grads, *a, g);
            }
            if needs(*b) {
                let mut g = if val(*b).shape() == grad.shape() {
                    grad.clone()
                } else {
                    reduce_to_single(grad, val(*b).shape())
                };
                if sign < 0.0 {
                    g.scale_in_place(-1.0);
                }
                accumulate(grads, *b, g);
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                if !needs(this) {
                    continue;
                }
                let ov = val(other);
                let prod: Vec<f64> = if ov.len() == 1 {
                    let c = ov.data()[0];
                    grad.data().iter().map(|g| g * c).collect()
                } else {
                    grad.data().iter().zip(ov.data()).map(|(g, o)| g * o).collect()
                };
                let full = Tensor::from_parts(grad.shape().to_vec(), prod);
                let g = if val(this).shape() == grad.shape() {
                    full
                } else {
                    reduce_to_single(&full, val(this).shape())
                };
                accumulate(grads, this, g);
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                accumulate(grads, *a, grad.map(|g| g * c));
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                accumulate(grads, *a, grad.clone());
            }
        }
        Op::Abs(a) | Op::Relu(a) => {
            if needs(*a) {
                let is_relu = matches!(node.op, Op::Relu(_));
                let data = grad
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 && !is_relu {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(grad.shape().to_vec(), data));
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let data = grad
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(grad.shape().to_vec(), data));
            }
        }
        Op::Tanh(a) => {
            if needs(*a) {
                let data = grad
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(grad.shape().to_vec(), data));
            }
        }
        Op::Softmax { x, axis } => {
            if needs(*x) {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), grad.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            dx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *xhat.shape().last().unwrap();
            let rows = xhat.len() / d.max(1);
            let gam = val(*gamma).data();
            let (gd, xh) = (grad.data(), xhat.data());
            if needs(*gamma) {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] += gd[r * d + c] * xh[r * d + c];
                    }
                }
                accumulate(grads, *gamma, Tensor::from_parts(vec![d], dg));
            }
            if needs(*beta) {
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        db[c] += gd[r * d + c];
                    }
                }
                accumulate(grads, *beta, Tensor::from_parts(vec![d], db));
            }
            if needs(*x) {
                let mut dx = vec![0.0; xhat.len()];
                let df = d as f64;
                for r in 0..rows {
                    let off = r * d;
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..d {
                        let dxh = gd[off + c] * gam[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[off + c];
                    }
                    for c in 0..d {
                        let dxh = gd[off + c] * gam[c];
                        dx[off + c] = inv_std[r] / df * (df * dxh - sum_dxh - xh[off + c] * sum_dxh_xh);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xhat.shape().to_vec(), dx));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(grad.shape(), *axis);
            let total = grad.shape()[*axis];
            let mut offset = 0;
            for part in parts {
                let pshape = val(*part).shape().to_vec();
                let len = pshape[*axis];
                if needs(*part) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&grad.data()[start..start + len * inner]);
                    }
                    accumulate(grads, *part, Tensor::from_parts(pshape, d));
                }
                offset += len;
            }
        }
        Op::Reduce { x, kind, axis } => {
            if needs(*x) {
                let xshape = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&xshape, *axis);
                let c = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / n as f64,
                };
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = grad.data()[o * inner + i] * c;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xshape, dx));
            }
        }
        Op::SumAll(x) => {
            if needs(*x) {
                let g = grad.data()[0];
                accumulate(grads, *x, Tensor::full(val(*x).shape().to_vec(), g));
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if needs(*logits) {
                let (b, k) = probs.dims2().unwrap();
                let g = grad.data()[0] / b as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * g).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= g;
                }
                accumulate(grads, *logits, Tensor::from_parts(vec![b, k], d));
            }
        }
        Op::Transpose(x) => {
            if needs(*x) {
                accumulate(grads, *x, transpose2(grad));
            }
        }
        Op::Narrow { x, axis, start } => {
            if needs(*x) {
                let xshape = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&xshape, *axis);
                let len = grad.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, Tensor::from_parts(xshape, dx));
            }
        }
        Op::AddBias { x, bias } => {
            if needs(*x) {
                accumulate(grads, *x, grad.clone());
            }
            if needs(*bias) {
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                for (i, g) in grad.data().iter().enumerate() {
                    db[i % n] += g;
                }
                accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
            }
        }
        Op::ShiftRows { x, by } => {
            if needs(*x) {
                let (t, c) = grad.dims2().unwrap();
                let mut dx = vec![0.0; t * c];
                for row in 0..t.saturating_sub(*by) {
                    dx[row * c..(row + 1) * c].copy_from_slice(&grad.data()[(row + by) * c..(row + by + 1) * c]);
                }
                accumulate(grads, *x, Tensor::from_parts(vec![t, c], dx));
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, grad.data().to_vec()));
            }
        }
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("transpose of a matrix");
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Gradients produced by one backward pass, keyed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_id(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn single_or_same(a: &Tensor, b: &Tensor, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(dim_err(format!(
            "{what}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::from_parts(shape, data)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn check_same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::Usage("operands belong to different graphs".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, needs)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner extents differ, {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.binary(other, Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = single_or_same(&a, &b, "add")?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x + y);
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = single_or_same(&a, &b, "sub")?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x - y);
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = single_or_same(&a, &b, "mul")?;
        let out = zip_broadcast(&a, &b, shape, |x, y| x * y);
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(dim_err(format!("softmax axis {axis} out of range for shape {:?}", x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| xd[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(x.shape().to_vec(), out), Op::Softmax { x: self.id, axis }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.check_same_graph(gamma)?;
        self.check_same_graph(beta)?;
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let d = *x.shape().last().ok_or_else(|| dim_err("layer_norm on a scalar"))?;
        if g.shape() != [d] || b.shape() != [d] {
            return Err(dim_err(format!(
                "layer_norm: last extent {d} vs gamma {:?} / beta {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let rows = if d == 0 { 0 } else { x.len() / d };
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let shape = x.shape().to_vec();
        Ok(self.graph.push(
            Tensor::from_parts(shape.clone(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Tensor::from_parts(shape, xhat),
                inv_std,
            },
            needs,
        ))
    }

    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(dim_err(format!("reduce axis {axis} out of range for shape {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        if kind == ReduceKind::Mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Reduce { x: self.id, kind, axis }))
    }

    pub fn sum(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Mean, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let t = transpose2(&self.value());
        Ok(self.unary(t, Op::Transpose(self.id)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(dim_err(format!(
                "narrow [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Narrow { x: self.id, axis, start }))
    }

    /// Adds a bias vector to every row (last-axis broadcast).
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(bias)?;
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap_or(&0);
        if b.shape() != [n] {
            return Err(dim_err(format!("bias {:?} does not fit rows of {:?}", b.shape(), x.shape())));
        }
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % n]).collect();
        Ok(self.binary(
            bias,
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddBias { x: self.id, bias: bias.id },
        ))
    }

    /// Causal shift of a `T×C` matrix: row `t` of the output is row `t-by`
    /// of the input, zero for `t < by`.
    pub fn shift_rows(&self, by: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (t, c) = x.dims2()?;
        let mut out = vec![0.0; t * c];
        for row in by..t {
            out[row * c..(row + 1) * c].copy_from_slice(&x.data()[(row - by) * c..(row - by + 1) * c]);
        }
        Ok(self.unary(Tensor::from_parts(vec![t, c], out), Op::ShiftRows { x: self.id, by }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g>> {
        let logits = self.value();
        let (b, k) = logits.dims2()?;
        if labels.len() != b {
            return Err(dim_err(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let l = &logits.data()[row * k..(row + 1) * k];
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = l.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..k {
                probs[row * k + c] = (l[c] - lse).exp();
            }
            loss += lse - l[label];
        }
        loss /= b as f64;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs: Tensor::from_parts(vec![b, k], probs),
            },
        ))
    }
}

/// Joins `parts` along `axis`; every other extent must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| dim_err("concat of zero parts"))?;
    let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(dim_err(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for (p, v) in parts.iter().zip(&values) {
        first.check_same_graph(p)?;
        let agree = v.rank() == rank
            && v.shape().iter().zip(values[0].shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(dim_err(format!(
                "concat on axis {axis}: shape {:?} does not match {:?}",
                v.shape(),
                values[0].shape()
            )));
        }
    }
    let mut shape = values[0].shape().to_vec();
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let needs = parts.iter().any(|p| p.requires_grad());
    Ok(first.graph.push(
        Tensor::from_parts(shape, out),
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        needs,
    ))
}

/// Uniform entry point for the elementwise kinds. Unary kinds ignore
/// `operand`; `Scale` requires a scalar operand.
pub fn elementwise<'g>(kind: ElementwiseKind, a: Var<'g>, operand: Option<Operand<'g>>) -> Result<Var<'g>> {
    let as_var = |op: Option<Operand<'g>>| -> Result<Var<'g>> {
        match op {
            Some(Operand::Var(v)) => Ok(v),
            Some(Operand::Scalar(c)) => Ok(a.graph.constant(Tensor::scalar(c))),
            None => Err(Error::Usage(format!("{kind:?} needs a second operand"))),
        }
    };
    match kind {
        ElementwiseKind::Add => a.add(&as_var(operand)?),
        ElementwiseKind::Sub => a.sub(&as_var(operand)?),
        ElementwiseKind::Mul => a.mul(&as_var(operand)?),
        ElementwiseKind::Abs => Ok(a.abs()),
        ElementwiseKind::Relu => Ok(a.relu()),
        ElementwiseKind::Scale => match operand {
            Some(Operand::Scalar(c)) => Ok(a.scale(c)),
            Some(Operand::Var(v)) => a.mul(&v),
            None => Err(Error::Usage("scale needs a factor".into())),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let b = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(*i.matmul(&b).unwrap().value(), *b.value());

        let r = g.constant(m(&[&[1.0, 2.0]]));
        let c = g.constant(m(&[&[3.0], &[4.0]]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] · [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        // Frozen against central differences at step 1e-6: d/dA sum(AB) has
        // every row equal to the row sums of B.
        let g = Graph::new();
        let a = g.param(Tensor::identity(2));
        let b = g.constant(m(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let loss = a.matmul(&b).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(&[0.0, 3f64.ln()]));
        let y = x.softmax(0).unwrap().value();
        assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, f64::NAN]));
        assert!(matches!(x.softmax(0), Err(Error::Numeric(_))));
        assert!(matches!(x.softmax(1), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::new();
        let one = g.constant(Tensor::ones(vec![3]));
        let zero = g.constant(Tensor::zeros(vec![3]));
        let x = g.constant(Tensor::vector(&[5.0, 5.0, 5.0]));
        assert_eq!(x.layer_norm(&one, &zero, 1e-5).unwrap().value().data(), &[0.0, 0.0, 0.0]);

        let one = g.constant(Tensor::ones(vec![2]));
        let zero = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(Tensor::vector(&[1.0, 3.0]));
        let y = x.layer_norm(&one, &zero, 0.0).unwrap().value();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let two = g.constant(Tensor::full(vec![2], 2.0));
        let y = x.layer_norm(&one, &two, 0.0).unwrap().value();
        assert_eq!(y.data(), &[1.0, 3.0]);
        assert!(x.layer_norm(&g.constant(Tensor::ones(vec![3])), &two, 0.0).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, -2.0]));
        let z = elementwise(ElementwiseKind::Sub, x, Some(Operand::Var(x))).unwrap().abs();
        assert_eq!(z.value().data(), &[0.0, 0.0]);
        let s = elementwise(ElementwiseKind::Scale, x, Some(Operand::Scalar(0.0))).unwrap();
        assert_eq!(s.value().data(), &[0.0, 0.0]);
        let r = elementwise(ElementwiseKind::Relu, x, None).unwrap();
        assert_eq!(r.value().data(), &[1.0, 0.0]);
        let grads = g.backward(r.sum_all()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[0.0]));
        let grads = g.backward(x.relu().sum_all()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn broadcast_limited_to_scalars() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
        let s = g.param(Tensor::vector(&[3.0]));
        let a = g.constant(Tensor::ones(vec![2, 2]));
        let y = a.mul(&s).unwrap();
        assert_eq!(y.value().data(), &[3.0; 4]);
        let grads = g.backward(y.sum_all()).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[4.0]);
    }

    #[test]
    fn concat_examples() {
        let g = Graph::new();
        let a = g.param(m(&[&[1.0, 2.0]]));
        let b = g.param(m(&[&[3.0, 4.0]]));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().shape(), &[1, 4]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let empty = g.constant(Tensor::zeros(vec![1, 0]));
        assert_eq!(*concat(&[a, empty], 1).unwrap().value(), *a.value());
        let bad = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(concat(&[a, bad], 1).is_err());
        let grads = g.backward(c.sum_all()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 3.0]));
        let mean = x.mean(0).unwrap();
        assert_eq!(mean.value().data(), &[2.0]);
        assert_eq!(mean.value().rank(), 0);
        let grads = g.backward(mean).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5]);
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 2]));
        assert_eq!(z.sum(0).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let logits = g.param(Tensor::zeros(vec![1, 4]));
        let loss = logits.cross_entropy(&[2]).unwrap();
        assert_abs_diff_eq!(loss.value().item(), 4f64.ln(), epsilon = 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(logits).unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);

        let g = Graph::new();
        let logits = g.param(Tensor::zeros(vec![1, 4]));
        assert!(matches!(logits.cross_entropy(&[4]), Err(Error::Validation(_))));

        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let g = Graph::new();
            let l = g.constant(Tensor::from_rows(&[&[margin, 0.0, 0.0]]).unwrap());
            let loss = l.cross_entropy(&[0]).unwrap().value().item();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn backward_examples_and_errors() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(g.backward(loss), Err(Error::Usage(_))));

        let g = Graph::new();
        let x = g.param(Tensor::ones(vec![2, 3]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let grads = g.backward(x.sum_all()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn shift_rows_and_narrow() {
        let g = Graph::new();
        let x = g.param(m(&[&[1.0], &[2.0], &[3.0]]));
        let s = x.shift_rows(1).unwrap();
        assert_eq!(s.value().data(), &[0.0, 1.0, 2.0]);
        let n = x.narrow(0, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[2.0, 3.0]);
        let loss = s.add(&x).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 1.0]);
    }
}
