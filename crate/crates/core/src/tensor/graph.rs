use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{GradBuffer, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gather(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    LayerNorm(usize, Vec<f64>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, usize>,
    consumed: bool,
}

/// A recording tape. Nodes are appended in evaluation order, so parents always
/// precede children and the reverse sweep is a plain reverse iteration.
#[derive(Debug)]
pub struct Graph {
    inner: RefCell<Inner>,
    record: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that records ops for a later backward pass.
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            record: true,
        }
    }

    /// Forward-only evaluation: nothing requires grad and no backward state is kept.
    pub fn inference() -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let (op, needs_grad) = if self.record && needs_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        inner.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var { graph: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under test).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().param_leaves.get(&id) {
            return Var { graph: self, id: node };
        }
        let mut inner = self.inner.borrow_mut();
        let node = inner.nodes.len();
        inner.nodes.push(Node {
            value: store.shared(id),
            op: if self.record { Op::Param(id) } else { Op::Leaf },
            needs_grad: self.record,
        });
        inner.param_leaves.insert(id, node);
        Var { graph: self, id: node }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    /// Reverse sweep from a scalar loss. Each node is visited once; the tape
    /// cannot be swept a second time.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if !self.record {
            return Err(Error::contract("backward on an inference graph"));
        }
        if inner.consumed {
            return Err(Error::contract("tape already consumed by a backward pass"));
        }
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut visited = 0usize;
        let mut params = Vec::new();
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                    continue;
                }
                Op::Param(pid) => {
                    params.push((*pid, g));
                    continue;
                }
                _ => {}
            }
            backprop(nodes, id, &g, &mut grads);
        }
        Ok(Gradients {
            params,
            leaves,
            visited,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if nodes[*a].needs_grad {
                acc(grads, nodes, *a, matmul_t(g, vb.data(), m, n, k));
            }
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, matmul_tn(va.data(), g, m, k, n));
            }
        }
        Op::MatMulT(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.rows());
            if nodes[*a].needs_grad {
                acc(grads, nodes, *a, matmul(g, vb.data(), m, n, k));
            }
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, matmul_tn(g, va.data(), m, n, k));
            }
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            acc(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            acc(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].needs_grad {
                acc(grads, nodes, *a, zip_map(g, vb.data(), |x, y| x * y));
            }
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, zip_map(g, va.data(), |x, y| x * y));
            }
        }
        Op::AddRow(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            if nodes[*b].needs_grad {
                acc(grads, nodes, *b, col_sums(g, out.cols()));
            }
        }
        Op::MulRow(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let c = va.cols();
            if nodes[*a].needs_grad {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * vb.data()[i % c])
                    .collect();
                acc(grads, nodes, *a, d);
            }
            if nodes[*b].needs_grad {
                let prod = zip_map(g, va.data(), |x, y| x * y);
                acc(grads, nodes, *b, col_sums(&prod, c));
            }
        }
        Op::Scale(a, s) => acc(grads, nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::Gather(table, idx) => {
            let vt = val(*table);
            let c = vt.cols();
            let mut d = vec![0.0; vt.len()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g[r * c + j];
                }
            }
            acc(grads, nodes, *table, d);
        }
        Op::Pick(a, targets) => {
            let va = val(*a);
            let c = va.cols();
            let mut d = vec![0.0; va.len()];
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] += g[r];
            }
            acc(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let y = out.data();
            let c = out.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..out.rows() {
                let ys = &y[r * c..(r + 1) * c];
                let gs = &g[r * c..(r + 1) * c];
                let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    d[r * c + j] = ys[j] * (gs[j] - dot);
                }
            }
            acc(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a) => {
            let y = out.data();
            let c = out.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..out.rows() {
                let gs = &g[r * c..(r + 1) * c];
                let total: f64 = gs.iter().sum();
                for j in 0..c {
                    d[r * c + j] = gs[j] - y[r * c + j].exp() * total;
                }
            }
            acc(grads, nodes, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = zip_map(g, out.data(), |x, s| x * s * (1.0 - s));
            acc(grads, nodes, *a, d);
        }
        Op::LogSigmoid(a) => {
            let d = zip_map(g, val(*a).data(), |x, z| x * sigmoid(-z));
            acc(grads, nodes, *a, d);
        }
        Op::Gelu(a) => {
            let d = zip_map(g, val(*a).data(), |x, z| x * gelu_grad(z));
            acc(grads, nodes, *a, d);
        }
        Op::Relu(a) => {
            let d = zip_map(g, val(*a).data(), |x, z| if z > 0.0 { x } else { 0.0 });
            acc(grads, nodes, *a, d);
        }
        Op::Exp(a) => acc(grads, nodes, *a, zip_map(g, out.data(), |x, y| x * y)),
        Op::Ln(a) => acc(grads, nodes, *a, zip_map(g, val(*a).data(), |x, z| x / z)),
        Op::Square(a) => {
            acc(grads, nodes, *a, zip_map(g, val(*a).data(), |x, z| 2.0 * x * z))
        }
        Op::LayerNorm(a, rstd) => {
            let y = out.data();
            let c = out.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..out.rows() {
                let ys = &y[r * c..(r + 1) * c];
                let gs = &g[r * c..(r + 1) * c];
                let mean_g: f64 = gs.iter().sum::<f64>() / c as f64;
                let mean_gy: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                for j in 0..c {
                    d[r * c + j] = rstd[r] * (gs[j] - mean_g - ys[j] * mean_gy);
                }
            }
            acc(grads, nodes, *a, d);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                acc(grads, nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                let mut d = Vec::with_capacity(val(p).len());
                for r in 0..out.rows() {
                    d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                acc(grads, nodes, p, d);
                offset += c;
            }
        }
        Op::SliceRows(a, start) => {
            let va = val(*a);
            let mut d = vec![0.0; va.len()];
            let off = start * va.cols();
            d[off..off + g.len()].copy_from_slice(g);
            acc(grads, nodes, *a, d);
        }
        Op::SliceCols(a, start) => {
            let va = val(*a);
            let (c_in, c_out) = (va.cols(), out.cols());
            let mut d = vec![0.0; va.len()];
            for r in 0..va.rows() {
                d[r * c_in + start..r * c_in + start + c_out]
                    .copy_from_slice(&g[r * c_out..(r + 1) * c_out]);
            }
            acc(grads, nodes, *a, d);
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            acc(grads, nodes, *a, transpose(g, r, c));
        }
        Op::Sum(a) => acc(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            acc(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<usize, Vec<f64>>,
    visited: usize,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of an input leaf created with [`Graph::input`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(&var.id).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn accumulate_into(&self, buf: &mut GradBuffer, scale: f64) {
        for (p, g) in &self.params {
            buf.add(*p, g, scale);
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn check_same(&self, other: &Var<'g>, op: &'static str) -> Result<()> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn needs_any(&self, others: &[usize]) -> bool {
        self.graph.needs(self.id) || others.iter().any(|&o| self.graph.needs(o))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.graph.push(t, op, self.requires_grad())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() > 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let t = Tensor {
            shape: vec![m, n],
            data: matmul(a.data(), b.data(), m, k, n),
        };
        Ok(self.graph.push(t, Op::MatMul(self.id, rhs.id), self.needs_any(&[rhs.id])))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_t(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() > 2 || b.shape().len() > 2 || a.cols() != b.cols() {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let t = Tensor {
            shape: vec![m, n],
            data: matmul_t(a.data(), b.data(), m, k, n),
        };
        Ok(self.graph.push(t, Op::MatMulT(self.id, rhs.id), self.needs_any(&[rhs.id])))
    }

    fn binary(&self, rhs: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(&rhs, op)?;
        let (a, b) = (self.value(), rhs.value());
        Ok(Tensor {
            shape: a.shape().to_vec(),
            data: zip_map(a.data(), b.data(), f),
        })
    }

    pub fn add(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let t = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.graph.push(t, Op::Add(self.id, rhs.id), self.needs_any(&[rhs.id])))
    }

    pub fn sub(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let t = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.graph.push(t, Op::Sub(self.id, rhs.id), self.needs_any(&[rhs.id])))
    }

    pub fn mul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        let t = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.graph.push(t, Op::Mul(self.id, rhs.id), self.needs_any(&[rhs.id])))
    }

    fn row_op(&self, row: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), row.value());
        if b.len() != a.cols() || b.rows() != 1 {
            return Err(Error::Dimension {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let c = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % c]))
            .collect();
        Ok(Tensor {
            shape: a.shape().to_vec(),
            data,
        })
    }

    /// Adds a length-`cols` row vector to every row.
    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        let t = self.row_op(row, "add_row", |x, y| x + y)?;
        Ok(self.graph.push(t, Op::AddRow(self.id, row.id), self.needs_any(&[row.id])))
    }

    /// Multiplies every row elementwise by a length-`cols` row vector.
    pub fn mul_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        let t = self.row_op(row, "mul_row", |x, y| x * y)?;
        Ok(self.graph.push(t, Op::MulRow(self.id, row.id), self.needs_any(&[row.id])))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&self) -> Var<'g> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self) -> Var<'g> {
        let a = self.value();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(a.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.graph.push(t, Op::Softmax(self.id), self.requires_grad())
    }

    pub fn log_softmax(&self) -> Var<'g> {
        let a = self.value();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(a.cols()) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.graph.push(t, Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self) -> Var<'g> {
        let a = self.value();
        let c = a.cols();
        let mut data = a.data().to_vec();
        let mut rstds = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.graph.push(t, Op::LayerNorm(self.id, rstds), self.requires_grad())
    }

    /// Selects rows of an embedding table: `[v,h]` gathered by `ids` gives `[len(ids),h]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: a.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(a.row_slice(i));
        }
        let t = Tensor {
            shape: vec![ids.len(), c],
            data,
        };
        Ok(self.graph.push(t, Op::Gather(self.id, ids.to_vec()), self.requires_grad()))
    }

    /// `out[i] = self[i, targets[i]]`, shape `[len(targets)]`.
    pub fn pick(&self, targets: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.cols();
        if targets.len() != a.rows() || targets.iter().any(|&t| t >= c) {
            return Err(Error::Dimension {
                op: "pick",
                left: a.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let data = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| a.data()[r * c + t])
            .collect();
        let t = Tensor {
            shape: vec![targets.len()],
            data,
        };
        Ok(self.graph.push(t, Op::Pick(self.id, targets.to_vec()), self.requires_grad()))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let graph = first.graph;
        let c = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: first.shape(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = ids.iter().any(|&i| graph.needs(i));
        let t = Tensor {
            shape: vec![rows, c],
            data,
        };
        Ok(graph.push(t, Op::ConcatRows(ids), needs))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let graph = first.graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = values[0].rows();
        if let Some(v) = values.iter().find(|v| v.rows() != r) {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: values[0].shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for v in &values {
                data.extend_from_slice(v.row_slice(row));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = ids.iter().any(|&i| graph.needs(i));
        let t = Tensor {
            shape: vec![r, total],
            data,
        };
        Ok(graph.push(t, Op::ConcatCols(ids), needs))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        if start + len > a.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: a.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = a.cols();
        let t = Tensor {
            shape: vec![len, c],
            data: a.data()[start * c..(start + len) * c].to_vec(),
        };
        Ok(self.graph.push(t, Op::SliceRows(self.id, start), self.requires_grad()))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        if start + len > a.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: a.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row_slice(r)[start..start + len]);
        }
        let t = Tensor {
            shape: vec![a.rows(), len],
            data,
        };
        Ok(self.graph.push(t, Op::SliceCols(self.id, start), self.requires_grad()))
    }

    pub fn transpose(&self) -> Var<'g> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let t = Tensor {
            shape: vec![c, r],
            data: transpose(a.data(), r, c),
        };
        self.graph.push(t, Op::Transpose(self.id), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: a.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: a.data().to_vec(),
        };
        Ok(self.graph.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.graph
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.len() as f64;
        self.graph
            .push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Cross-entropy of row-wise logits against integer targets, summed over rows.
    pub fn cross_entropy_sum(&self, targets: &[usize]) -> Result<Var<'g>> {
        Ok(self.log_softmax().pick(targets)?.sum().neg())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn col_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `[m,k] x [k,n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T`
fn matmul_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[m,k]^T x [m,n] -> [k,n]`
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(crow) {
                *o += x * y;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::inference();
        let x = g.constant(Tensor::row(vec![0.0; 3]));
        let p = x.softmax().value();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let g = Graph::inference();
        assert_eq!(g.scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::inference();
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.25, 7.0, 9.0]).unwrap();
        let i = g.constant(Tensor::identity(3));
        let out = i.matmul(g.constant(x.clone())).unwrap().value();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::inference();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_dot_gradient_sums_to_zero() {
        let g = Graph::new();
        let x = g.input(Tensor::row(vec![0.3, -1.2, 2.0, 0.1]));
        let c = g.constant(Tensor::row(vec![1.0, 4.0, -2.0, 0.5]));
        let y = x.softmax().mul(c).unwrap().sum();
        let grads = g.backward(y).unwrap();
        let s: f64 = grads.wrt(x).unwrap().iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = a*b + a  with b = 2a -> dy/da = 4a + 1
        let g = Graph::new();
        let a = g.input(Tensor::scalar(1.5));
        let b = a.scale(2.0);
        let y = a.mul(b).unwrap().add(a).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(close(grads.wrt(a).unwrap()[0], 4.0 * 1.5 + 1.0, 1e-14));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x.square()), Err(Error::Contract(_))));
        let g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = x.square();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let g = Graph::new();
        let x = g.input(Tensor::row(vec![0.5, -0.5]));
        let h = x.sigmoid();
        let y = h.add(h).unwrap().mul(x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        // x, h, add, mul, sum
        assert_eq!(grads.visited(), 5);
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn inference_graph_has_no_grad() {
        let g = Graph::inference();
        let x = g.input(Tensor::scalar(1.0));
        assert!(!x.requires_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }
}
