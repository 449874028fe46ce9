//! Define-by-run tape with replayable forward and reverse-mode backward.
//!
//! Every op evaluates eagerly when recorded. The recorded op list can be
//! replayed with new leaf values through [`Graph::forward`], which is what
//! the finite-difference checker relies on.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, LowRankCache};
use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    Constant,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    RepeatCols(NodeId, usize),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNorm(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Detach(NodeId),
    LowRankSqDist {
        z: NodeId,
        mu: NodeId,
        basis: NodeId,
        offset: NodeId,
    },
    Attention {
        qkv: NodeId,
        groups: usize,
        heads: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::RepeatCols(..) => "repeat_cols",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm(..) => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Detach(_) => "detach",
            Op::LowRankSqDist { .. } => "lowrank_sqdist",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::RepeatCols(a, _)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::LayerNorm(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Detach(a)
            | Op::Attention { qkv: a, .. } => vec![*a],
            Op::ConcatCols(ids) => ids.clone(),
            Op::LowRankSqDist {
                z,
                mu,
                basis,
                offset,
            } => vec![*z, *mu, *basis, *offset],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(grads: BTreeMap<String, Tensor>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, inserting names not yet present.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn shape_err(node: NodeId, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Names of all parameter leaves in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn push_leaf(&mut self, op: Op, name: Option<&str>, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        let requires_grad = matches!(op, Op::Param(_));
        if let Some(name) = name {
            let prev = self.leaves.insert(name.to_string(), id);
            assert!(prev.is_none(), "duplicate graph leaf `{name}`");
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, Some(name), value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Op::Param(name.to_string()), Some(name), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, None, value)
    }

    /// Names a node so that [`Graph::forward`] reports it.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.eval(id, &op)?;
        let requires_grad = !matches!(op, Op::Detach(_))
            && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    /// Replays every recorded op after replacing the named leaves.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        for (name, value) in inputs {
            let id = *self
                .leaves
                .get(*name)
                .ok_or_else(|| Error::MissingInput(name.to_string()))?;
            let node = &self.nodes[id];
            if node.value.shape() != value.shape() {
                return Err(shape_err(
                    id,
                    &node.op,
                    format!("declared {:?}, given {:?}", node.value.shape(), value.shape()),
                ));
            }
            self.nodes[id].value = value.clone();
        }
        for id in 0..self.nodes.len() {
            if matches!(
                self.nodes[id].op,
                Op::Input | Op::Param(_) | Op::Constant
            ) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.nodes[id].value = self.eval(id, &op)?;
        }
        Ok(self
            .outputs
            .iter()
            .map(|(k, &id)| (k.clone(), self.nodes[id].value.clone()))
            .collect())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the vector `b`.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MulRow(a, b))
    }

    /// `[m]` or `[m, 1]` to `[m, n]` by repeating each entry across columns.
    pub fn repeat_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.record(Op::RepeatCols(a, n))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Shift(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Gelu(a))
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Op::LayerNorm(a, eps))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSoftmax(a))
    }

    /// Reduces the last axis.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSumExp(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.record(Op::GatherRows(a, rows))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.record(Op::ConcatCols(parts))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    /// Sum over the last axis.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::RowSum(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(a))
    }

    /// Identity in the forward pass, blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Detach(a))
    }

    /// Squared distances `‖z_i − (M_ν μ̃_iν + s_ν)‖²` for `z: [m, H]`,
    /// `mu: [m, K·h]`, `basis: [K, H, h]`, `offset: [K, H]`, giving `[m, K]`.
    pub fn lowrank_sqdist(
        &mut self,
        z: NodeId,
        mu: NodeId,
        basis: NodeId,
        offset: NodeId,
    ) -> Result<NodeId> {
        self.record(Op::LowRankSqDist {
            z,
            mu,
            basis,
            offset,
        })
    }

    /// Multi-head self-attention over `groups` independent sequences.
    /// `qkv` is `[groups·L, 3·W]` with queries, keys and values side by side;
    /// the result is `[groups·L, W]`.
    pub fn attention(&mut self, qkv: NodeId, groups: usize, heads: usize) -> Result<NodeId> {
        self.record(Op::Attention { qkv, groups, heads })
    }

    // ------------------------------------------------------------ forward

    fn eval(&self, id: NodeId, op: &Op) -> Result<Tensor> {
        let v = |i: NodeId| &self.nodes[i].value;
        let err = |detail: String| shape_err(id, op, detail);
        let out = match op {
            Op::Input | Op::Param(_) | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(err(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), b.data(), &mut out, 0.0);
                Tensor::matrix(m, n, out)
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                    return Err(err(format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                let mut out = vec![0.0; m * n];
                gemm_strided(
                    m,
                    k,
                    n,
                    a.data(),
                    k as isize,
                    1,
                    b.data(),
                    1,
                    k as isize,
                    &mut out,
                    0.0,
                );
                Tensor::matrix(m, n, out)
            }
            Op::Transpose(a) => {
                let a = v(*a);
                if a.rank() != 2 {
                    return Err(err(format!("rank-2 required, got {:?}", a.shape())));
                }
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a.data()[i * n + j];
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() {
                    return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                match op {
                    Op::Add(..) => a.zip_map(b, |x, y| x + y),
                    Op::Sub(..) => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::AddRow(a, b) | Op::MulRow(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if b.rank() != 1 || a.rank() == 0 || a.last_dim() != b.numel() {
                    return Err(err(format!("row {:?} onto {:?}", b.shape(), a.shape())));
                }
                let mut out = a.clone();
                let n = b.numel();
                let add = matches!(op, Op::AddRow(..));
                for row in out.data_mut().chunks_mut(n) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        if add {
                            *x += y;
                        } else {
                            *x *= y;
                        }
                    }
                }
                out
            }
            Op::RepeatCols(a, n) => {
                let a = v(*a);
                let ok = a.rank() == 1 || (a.rank() == 2 && a.shape()[1] == 1);
                if !ok {
                    return Err(err(format!("[m] or [m, 1] required, got {:?}", a.shape())));
                }
                let m = a.shape()[0];
                let mut out = Vec::with_capacity(m * n);
                for &x in a.data() {
                    out.extend(std::iter::repeat_n(x, *n));
                }
                Tensor::matrix(m, *n, out)
            }
            Op::Scale(a, c) => v(*a).map(|x| x * c),
            Op::Shift(a, c) => v(*a).map(|x| x + c),
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::Gelu(a) => v(*a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())),
            Op::LayerNorm(a, eps) => {
                let a = v(*a);
                if a.rank() == 0 {
                    return Err(err("cannot normalize a scalar".into()));
                }
                let mut out = a.clone();
                let n = a.last_dim();
                for row in out.data_mut().chunks_mut(n) {
                    let (mean, inv) = kernels::row_moments(row, *eps);
                    for x in row.iter_mut() {
                        *x = (*x - mean) * inv;
                    }
                }
                out
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let a = v(*a);
                if a.rank() == 0 {
                    return Err(err("softmax of a scalar".into()));
                }
                let mut out = a.clone();
                let n = a.last_dim();
                let log = matches!(op, Op::LogSoftmax(_));
                for row in out.data_mut().chunks_mut(n) {
                    let lse = kernels::logsumexp(row);
                    for x in row.iter_mut() {
                        *x = if log { *x - lse } else { (*x - lse).exp() };
                    }
                }
                out
            }
            Op::LogSumExp(a) => {
                let a = v(*a);
                if a.rank() == 0 {
                    return Err(err("logsumexp of a scalar".into()));
                }
                let n = a.last_dim();
                let data: Vec<f64> = a.data().chunks(n).map(kernels::logsumexp).collect();
                Tensor::new(a.shape()[..a.rank() - 1].to_vec(), data)?
            }
            Op::GatherRows(a, rows) => {
                let a = v(*a);
                if a.rank() != 2 {
                    return Err(err(format!("rank-2 required, got {:?}", a.shape())));
                }
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut out = Vec::with_capacity(rows.len() * n);
                for &r in rows {
                    if r >= m {
                        return Err(err(format!("row {r} out of {m}")));
                    }
                    out.extend_from_slice(a.row(r));
                }
                Tensor::matrix(rows.len(), n, out)
            }
            Op::SliceCols(a, start, len) => {
                let a = v(*a);
                if a.rank() != 2 || start + len > a.shape()[1] {
                    return Err(err(format!("cols {start}..{} of {:?}", start + len, a.shape())));
                }
                let m = a.shape()[0];
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&a.row(i)[*start..start + len]);
                }
                Tensor::matrix(m, *len, out)
            }
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(err("nothing to concatenate".into()));
                }
                let m = v(parts[0]).shape().first().copied().unwrap_or(0);
                let mut total = 0;
                for &p in parts {
                    let t = v(p);
                    if t.rank() != 2 || t.shape()[0] != m {
                        return Err(err(format!("part {:?} with {m} rows expected", t.shape())));
                    }
                    total += t.shape()[1];
                }
                let mut out = Vec::with_capacity(m * total);
                for i in 0..m {
                    for &p in parts {
                        out.extend_from_slice(v(p).row(i));
                    }
                }
                Tensor::matrix(m, total, out)
            }
            Op::Reshape(a, shape) => v(*a)
                .clone()
                .reshaped(shape)
                .map_err(|e| err(e.to_string()))?,
            Op::RowSum(a) => {
                let a = v(*a);
                if a.rank() == 0 {
                    return Err(err("row sum of a scalar".into()));
                }
                let n = a.last_dim();
                let data = a.data().chunks(n).map(|r| r.iter().sum()).collect();
                Tensor::new(a.shape()[..a.rank() - 1].to_vec(), data)?
            }
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = v(*a);
                if a.numel() == 0 {
                    return Err(err("mean of an empty tensor".into()));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            Op::Detach(a) => v(*a).clone(),
            Op::LowRankSqDist {
                z,
                mu,
                basis,
                offset,
            } => {
                let (z, mu, basis, offset) = (v(*z), v(*mu), v(*basis), v(*offset));
                let dims = kernels::lowrank_dims(z, mu, basis, offset).map_err(err)?;
                let cache = LowRankCache::new(basis, offset, dims);
                let mut out = vec![0.0; dims.m * dims.k];
                for i in 0..dims.m {
                    let zi = z.row(i);
                    let zz: f64 = zi.iter().map(|x| x * x).sum();
                    for nu in 0..dims.k {
                        let mt = &mu.row(i)[nu * dims.h..(nu + 1) * dims.h];
                        out[i * dims.k + nu] = cache.sqdist(nu, zi, zz, mt);
                    }
                }
                Tensor::matrix(dims.m, dims.k, out)
            }
            Op::Attention { qkv, groups, heads } => {
                let x = v(*qkv);
                let dims = attention_dims(x, *groups, *heads).map_err(err)?;
                let mut out = vec![0.0; dims.rows() * dims.width];
                let mut scratch = AttentionScratch::new(dims);
                for grp in 0..dims.groups {
                    for head in 0..dims.heads {
                        scratch.load(x.data(), grp, head);
                        scratch.probs();
                        let o = scratch.context();
                        scratch.store(&mut out, &o, grp, head, dims.width, 0);
                    }
                }
                Tensor::matrix(dims.rows(), dims.width, out)
            }
        };
        Ok(out)
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar loss. Every parameter leaf receives a
    /// gradient; those the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = BTreeMap::new();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                op => self.backprop_op(op, &node.value, &g, &mut grads),
            }
        }

        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop_op(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |i: NodeId| &self.nodes[i].value;
        match op {
            Op::Input | Op::Param(_) | Op::Constant | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // g · bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.wants(*b) {
                    // aᵀ · g
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), bv.data(), &mut da, 0.0);
                    self.acc(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.wants(*b) {
                    // gᵀ · a
                    let mut db = vec![0.0; n * k];
                    gemm_strided(n, m, k, g.data(), 1, n as isize, av.data(), k as isize, 1, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::matrix(n, k, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.acc(grads, *a, Tensor::matrix(c, r, out));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(v(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(v(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    let n = v(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *b, Tensor::vector(db));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let n = bv.numel();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_mut(n) {
                        for (d, s) in row.iter_mut().zip(bv.data()) {
                            *d *= s;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for (grow, arow) in g.data().chunks(n).zip(av.data().chunks(n)) {
                        for ((d, x), y) in db.iter_mut().zip(grow).zip(arow) {
                            *d += x * y;
                        }
                    }
                    self.acc(grads, *b, Tensor::vector(db));
                }
            }
            Op::RepeatCols(a, n) => {
                let data: Vec<f64> = g.data().chunks(*n).map(|r| r.iter().sum()).collect();
                let da = Tensor::new(v(*a).shape().to_vec(), data).expect("repeat_cols grad");
                self.acc(grads, *a, da);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::Shift(a, _) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(v(*a), |x, p| x / p)),
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
            Op::Gelu(a) => {
                let da = g.zip_map(v(*a), |dy, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.acc(grads, *a, da);
            }
            Op::LayerNorm(a, eps) => {
                let av = v(*a);
                let n = av.last_dim();
                let mut da = g.clone();
                for ((drow, yrow), xrow) in da
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(av.data().chunks(n))
                {
                    let (_, inv) = kernels::row_moments(xrow, *eps);
                    let mean_g = drow.iter().sum::<f64>() / n as f64;
                    let mean_gy = drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (d, yy) in drow.iter_mut().zip(yrow) {
                        *d = inv * (*d - mean_g - yy * mean_gy);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let n = y.last_dim();
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for (d, lp) in drow.iter_mut().zip(yrow) {
                        *d -= lp.exp() * total;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LogSumExp(a) => {
                let av = v(*a);
                let n = av.last_dim();
                let mut da = av.clone();
                for ((drow, &lse), &gi) in da.data_mut().chunks_mut(n).zip(y.data()).zip(g.data()) {
                    for d in drow.iter_mut() {
                        *d = gi * (*d - lse).exp();
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::GatherRows(a, rows) => {
                let mut da = Tensor::zeros(v(*a).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let mut da = Tensor::zeros(v(*a).shape());
                for i in 0..g.shape()[0] {
                    da.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let shape = v(p).shape();
                    let (m, w) = (shape[0], shape[1]);
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g.row(i)[col..col + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(m, w, dp));
                    }
                    col += w;
                }
            }
            Op::Reshape(a, _) => {
                let da = g.clone().reshaped(v(*a).shape()).expect("reshape grad");
                self.acc(grads, *a, da);
            }
            Op::RowSum(a) => {
                let av = v(*a);
                let n = av.last_dim();
                let mut data = Vec::with_capacity(av.numel());
                for &x in g.data() {
                    data.extend(std::iter::repeat_n(x, n));
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), data).expect("row_sum grad"));
            }
            Op::Sum(a) => {
                let gi = g.item();
                self.acc(grads, *a, Tensor::filled(v(*a).shape(), gi));
            }
            Op::Mean(a) => {
                let av = v(*a);
                let gi = g.item() / av.numel() as f64;
                self.acc(grads, *a, Tensor::filled(av.shape(), gi));
            }
            Op::LowRankSqDist {
                z,
                mu,
                basis,
                offset,
            } => {
                let (zv, muv, bv, ov) = (v(*z), v(*mu), v(*basis), v(*offset));
                let dims = kernels::lowrank_dims(zv, muv, bv, ov).expect("validated in forward");
                let mut dz = Tensor::zeros(zv.shape());
                let mut dmu = Tensor::zeros(muv.shape());
                let mut dbasis = Tensor::zeros(bv.shape());
                let mut doffset = Tensor::zeros(ov.shape());
                kernels::lowrank_sqdist_backward(
                    dims,
                    zv,
                    muv,
                    bv,
                    ov,
                    g,
                    &mut dz,
                    &mut dmu,
                    &mut dbasis,
                    &mut doffset,
                );
                self.acc(grads, *z, dz);
                self.acc(grads, *mu, dmu);
                self.acc(grads, *basis, dbasis);
                self.acc(grads, *offset, doffset);
            }
            Op::Attention { qkv, groups, heads } => {
                let x = v(*qkv);
                let dims = attention_dims(x, *groups, *heads).expect("validated in forward");
                let mut dx = vec![0.0; x.numel()];
                let mut scratch = AttentionScratch::new(dims);
                for grp in 0..dims.groups {
                    for head in 0..dims.heads {
                        scratch.load(x.data(), grp, head);
                        scratch.probs();
                        let (dq, dk, dv) = scratch.backward(g.data(), grp, head);
                        let w3 = 3 * dims.width;
                        scratch.store(&mut dx, &dq, grp, head, w3, 0);
                        scratch.store(&mut dx, &dk, grp, head, w3, dims.width);
                        scratch.store(&mut dx, &dv, grp, head, w3, 2 * dims.width);
                    }
                }
                self.acc(grads, *qkv, Tensor::matrix(dims.rows(), 3 * dims.width, dx));
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttentionDims {
    groups: usize,
    heads: usize,
    seq: usize,
    width: usize,
    head_dim: usize,
}

impl AttentionDims {
    fn rows(&self) -> usize {
        self.groups * self.seq
    }
}

fn attention_dims(x: &Tensor, groups: usize, heads: usize) -> std::result::Result<AttentionDims, String> {
    if x.rank() != 2 || groups == 0 || heads == 0 {
        return Err(format!("[groups·L, 3·W] required, got {:?}", x.shape()));
    }
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    if rows % groups != 0 || cols % (3 * heads) != 0 {
        return Err(format!(
            "{:?} does not split into {groups} groups and {heads} heads",
            x.shape()
        ));
    }
    Ok(AttentionDims {
        groups,
        heads,
        seq: rows / groups,
        width: cols / 3,
        head_dim: cols / (3 * heads),
    })
}

/// Contiguous copies of one (group, head) block and its attention weights.
struct AttentionScratch {
    dims: AttentionDims,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
}

impl AttentionScratch {
    fn new(dims: AttentionDims) -> Self {
        let n = dims.seq * dims.head_dim;
        AttentionScratch {
            dims,
            q: vec![0.0; n],
            k: vec![0.0; n],
            v: vec![0.0; n],
            p: vec![0.0; dims.seq * dims.seq],
        }
    }

    fn load(&mut self, x: &[f64], grp: usize, head: usize) {
        let AttentionDims { seq, width, head_dim, .. } = self.dims;
        for r in 0..seq {
            let row = &x[(grp * seq + r) * 3 * width..(grp * seq + r + 1) * 3 * width];
            let c = head * head_dim;
            self.q[r * head_dim..(r + 1) * head_dim].copy_from_slice(&row[c..c + head_dim]);
            self.k[r * head_dim..(r + 1) * head_dim].copy_from_slice(&row[width + c..width + c + head_dim]);
            self.v[r * head_dim..(r + 1) * head_dim]
                .copy_from_slice(&row[2 * width + c..2 * width + c + head_dim]);
        }
    }

    fn probs(&mut self) {
        let AttentionDims { seq, head_dim, .. } = self.dims;
        let d = head_dim as isize;
        gemm_strided(seq, head_dim, seq, &self.q, d, 1, &self.k, 1, d, &mut self.p, 0.0);
        let scale = 1.0 / (head_dim as f64).sqrt();
        for row in self.p.chunks_mut(seq) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            kernels::softmax_in_place(row);
        }
    }

    fn context(&self) -> Vec<f64> {
        let AttentionDims { seq, head_dim, .. } = self.dims;
        let mut o = vec![0.0; seq * head_dim];
        gemm(seq, seq, head_dim, &self.p, &self.v, &mut o, 0.0);
        o
    }

    /// Writes a `[seq, head_dim]` block into a row-major matrix of `stride`
    /// columns at column `base + head·head_dim`.
    fn store(&self, dst: &mut [f64], block: &[f64], grp: usize, head: usize, stride: usize, base: usize) {
        let AttentionDims { seq, head_dim, .. } = self.dims;
        for r in 0..seq {
            let start = (grp * seq + r) * stride + base + head * head_dim;
            dst[start..start + head_dim].copy_from_slice(&block[r * head_dim..(r + 1) * head_dim]);
        }
    }

    fn backward(&self, g: &[f64], grp: usize, head: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let AttentionDims { seq, width, head_dim, .. } = self.dims;
        let d = head_dim as isize;
        let mut go = vec![0.0; seq * head_dim];
        for r in 0..seq {
            let start = (grp * seq + r) * width + head * head_dim;
            go[r * head_dim..(r + 1) * head_dim].copy_from_slice(&g[start..start + head_dim]);
        }
        // dP = dO Vᵀ, dV = Pᵀ dO
        let mut dp = vec![0.0; seq * seq];
        gemm_strided(seq, head_dim, seq, &go, d, 1, &self.v, 1, d, &mut dp, 0.0);
        let mut dv = vec![0.0; seq * head_dim];
        let s = seq as isize;
        gemm_strided(seq, seq, head_dim, &self.p, 1, s, &go, d, 1, &mut dv, 0.0);
        // softmax backward, folding in the 1/√d score scale
        let scale = 1.0 / (head_dim as f64).sqrt();
        for (drow, prow) in dp.chunks_mut(seq).zip(self.p.chunks(seq)) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (x, p) in drow.iter_mut().zip(prow) {
                *x = scale * p * (*x - dot);
            }
        }
        let mut dq = vec![0.0; seq * head_dim];
        gemm(seq, seq, head_dim, &dp, &self.k, &mut dq, 0.0);
        let mut dk = vec![0.0; seq * head_dim];
        gemm_strided(seq, seq, head_dim, &dp, 1, s, &self.q, d, 1, &mut dk, 0.0);
        (dq, dk, dv)
    }
}
