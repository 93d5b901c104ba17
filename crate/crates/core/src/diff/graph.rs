//! Static computation graph with forward evaluation and reverse-mode gradients.
//!
//! Nodes are appended in construction order, which is always a valid
//! topological order: an op can only reference nodes that already exist.
//! Backward walks the nodes in reverse id order, so gradient accumulation
//! order is fixed and results are bitwise reproducible.

use std::collections::{BTreeMap, HashMap};

use super::matrix::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Matrix};
use super::{DiffError, ParamStore, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-9;
/// Guard added to the norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    Parameter(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Elementwise sum with 2-D broadcasting of size-1 dimensions.
    Add(NodeId, NodeId),
    /// Elementwise product with 2-D broadcasting of size-1 dimensions.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Per-row normalization to zero mean, unit variance (no gain or shift).
    LayerNorm(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Mean over consecutive groups of `block` rows.
    MeanRows {
        input: NodeId,
        block: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// Row-wise cosine similarity of two equally shaped matrices, (r×1).
    CosineRows(NodeId, NodeId),
    TileRows {
        input: NodeId,
        times: usize,
    },
    Reshape {
        input: NodeId,
        rows: usize,
        cols: usize,
    },
    /// For each group of `block` rows: `A_g · B_gᵀ`, stacked to (rows × block).
    BlockMatMulNT {
        a: NodeId,
        b: NodeId,
        block: usize,
    },
    /// For each group of `block` rows: `A_g (block×block) · B_g (block×c)`.
    BlockMatMul {
        a: NodeId,
        b: NodeId,
        block: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Neg(_) => "neg",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LayerNorm(_) => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_row",
            Op::LogSoftmaxRows(_) => "log_softmax_row",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::CosineRows(..) => "cosine_sim",
            Op::TileRows { .. } => "tile_rows",
            Op::Reshape { .. } => "reshape",
            Op::BlockMatMulNT { .. } => "block_matmul_nt",
            Op::BlockMatMul { .. } => "block_matmul",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    params: HashMap<String, NodeId>,
}

/// Named input matrices for one evaluation.
pub type Inputs = BTreeMap<String, Matrix>;

/// Gradient of the loss for each parameter referenced by the graph.
pub type Gradients = BTreeMap<String, Matrix>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    /// Names of every parameter node, sorted.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    /// Parameter node; repeated calls with one name return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Parameter(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LayerNorm(a))
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmaxRows(a))
    }
    pub fn mean_rows(&mut self, input: NodeId, block: usize) -> NodeId {
        self.push(Op::MeanRows { input, block })
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts))
    }
    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }
    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { input, start, len })
    }
    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { input, start, len })
    }
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::CosineRows(a, b))
    }
    pub fn tile_rows(&mut self, input: NodeId, times: usize) -> NodeId {
        self.push(Op::TileRows { input, times })
    }
    pub fn reshape(&mut self, input: NodeId, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Reshape { input, rows, cols })
    }
    pub fn block_matmul_nt(&mut self, a: NodeId, b: NodeId, block: usize) -> NodeId {
        self.push(Op::BlockMatMulNT { a, b, block })
    }
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, block: usize) -> NodeId {
        self.push(Op::BlockMatMul { a, b, block })
    }
}

/// Values of every node after a forward pass, indexed by node id.
#[derive(Debug, Clone)]
pub struct Values(Vec<Matrix>);

impl Values {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.0[id.0]
    }

    pub fn into_value(mut self, id: NodeId) -> Matrix {
        self.0.swap_remove(id.0)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn broadcast_index(m: &Matrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows() == 1 { 0 } else { r };
    let cc = if m.cols() == 1 { 0 } else { c };
    m.get(rr, cc)
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn mismatch(id: usize, op: &Op, detail: String) -> DiffError {
    DiffError::ShapeMismatch {
        node: id,
        op: op.name(),
        detail,
    }
}

/// Evaluates every node.
pub fn forward(graph: &Graph, params: &ParamStore, inputs: &Inputs) -> Result<Values> {
    let mut vals: Vec<Matrix> = Vec::with_capacity(graph.ops.len());
    for (id, op) in graph.ops.iter().enumerate() {
        let v = eval_op(id, op, &vals, params, inputs)?;
        vals.push(v);
    }
    Ok(Values(vals))
}

fn eval_op(
    id: usize,
    op: &Op,
    vals: &[Matrix],
    params: &ParamStore,
    inputs: &Inputs,
) -> Result<Matrix> {
    let v = |n: &NodeId| &vals[n.0];
    let err = |detail: String| mismatch(id, op, detail);
    Ok(match op {
        Op::Input(name) => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| DiffError::Unbound(name.clone()))?,
        Op::Parameter(name) => params
            .get(name)
            .cloned()
            .ok_or_else(|| DiffError::Unbound(name.clone()))?,
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.cols() != b.rows() {
                return Err(err(format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            a.matmul(b)
        }
        Op::Transpose(a) => v(a).transpose(),
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (rows, cols) = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| err(format!("{:?} vs {:?}", a.shape(), b.shape())))?;
            let is_add = matches!(op, Op::Add(..));
            let mut out = Matrix::zeros(rows, cols);
            if a.shape() == b.shape() {
                for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = if is_add { x + y } else { x * y };
                }
            } else {
                for r in 0..rows {
                    for c in 0..cols {
                        let (x, y) = (broadcast_index(a, r, c), broadcast_index(b, r, c));
                        out.set(r, c, if is_add { x + y } else { x * y });
                    }
                }
            }
            out
        }
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::LayerNorm(a) => {
            let a = v(a);
            let mut out = Matrix::zeros(a.rows(), a.cols());
            let n = a.cols() as f64;
            for r in 0..a.rows() {
                let row = a.row(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                    *o = (x - mean) * inv;
                }
            }
            out
        }
        Op::SoftmaxRows(a) | Op::LogSoftmaxRows(a) => {
            let a = v(a);
            let log = matches!(op, Op::LogSoftmaxRows(_));
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let row = a.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let shift = if max.is_finite() { max } else { 0.0 };
                let sum: f64 = row.iter().map(|x| (x - shift).exp()).sum();
                let lse = shift + sum.ln();
                for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                    *o = if log {
                        x - lse
                    } else {
                        (x - shift).exp() / sum
                    };
                }
            }
            out
        }
        Op::MeanRows { input, block } => {
            let a = v(input);
            if *block == 0 || a.rows() % block != 0 {
                return Err(err(format!(
                    "{} rows not divisible by block {block}",
                    a.rows()
                )));
            }
            let groups = a.rows() / block;
            let mut out = Matrix::zeros(groups, a.cols());
            for g in 0..groups {
                let o = out.row_mut(g);
                for r in g * block..(g + 1) * block {
                    for (x, y) in o.iter_mut().zip(a.row(r)) {
                        *x += y;
                    }
                }
                o.iter_mut().for_each(|x| *x /= *block as f64);
            }
            out
        }
        Op::Sum(a) => Matrix::scalar(v(a).sum()),
        Op::Mean(a) => {
            let a = v(a);
            if a.data().is_empty() {
                return Err(err("mean of empty matrix".into()));
            }
            Matrix::scalar(a.sum() / a.data().len() as f64)
        }
        Op::ConcatRows(parts) => {
            let cols = parts.first().map(|p| v(p).cols()).unwrap_or(0);
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = v(p);
                if m.cols() != cols {
                    return Err(err(format!("column counts {} vs {cols}", m.cols())));
                }
                rows += m.rows();
                data.extend_from_slice(m.data());
            }
            Matrix::from_vec(rows, cols, data)
        }
        Op::ConcatCols(parts) => {
            let rows = parts.first().map(|p| v(p).rows()).unwrap_or(0);
            let mut cols = 0;
            for p in parts {
                if v(p).rows() != rows {
                    return Err(err(format!("row counts {} vs {rows}", v(p).rows())));
                }
                cols += v(p).cols();
            }
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for p in parts {
                    let m = v(p);
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                    off += m.cols();
                }
            }
            out
        }
        Op::SliceRows { input, start, len } => {
            let a = v(input);
            if start + len > a.rows() {
                return Err(err(format!(
                    "rows {start}..{} of {}",
                    start + len,
                    a.rows()
                )));
            }
            Matrix::from_vec(
                *len,
                a.cols(),
                a.data()[start * a.cols()..(start + len) * a.cols()].to_vec(),
            )
        }
        Op::SliceCols { input, start, len } => {
            let a = v(input);
            if start + len > a.cols() {
                return Err(err(format!(
                    "cols {start}..{} of {}",
                    start + len,
                    a.cols()
                )));
            }
            let mut out = Matrix::zeros(a.rows(), *len);
            for r in 0..a.rows() {
                out.row_mut(r)
                    .copy_from_slice(&a.row(r)[*start..start + len]);
            }
            out
        }
        Op::CosineRows(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let mut out = Matrix::zeros(a.rows(), 1);
            for r in 0..a.rows() {
                let (x, y) = (a.row(r), b.row(r));
                let denom = dot(x, x).sqrt() * dot(y, y).sqrt() + COSINE_EPS;
                out.set(r, 0, dot(x, y) / denom);
            }
            out
        }
        Op::TileRows { input, times } => {
            let a = v(input);
            let mut data = Vec::with_capacity(a.data().len() * times);
            for _ in 0..*times {
                data.extend_from_slice(a.data());
            }
            Matrix::from_vec(a.rows() * times, a.cols(), data)
        }
        Op::Reshape { input, rows, cols } => {
            let a = v(input);
            if a.data().len() != rows * cols {
                return Err(err(format!("{:?} into ({rows}, {cols})", a.shape())));
            }
            Matrix::from_vec(*rows, *cols, a.data().to_vec())
        }
        Op::BlockMatMulNT { a, b, block } => {
            let (a, b) = (v(a), v(b));
            if *block == 0 || a.shape() != b.shape() || a.rows() % block != 0 {
                return Err(err(format!(
                    "{:?} vs {:?}, block {block}",
                    a.shape(),
                    b.shape()
                )));
            }
            let k = a.cols();
            let mut out = Matrix::zeros(a.rows(), *block);
            for g in 0..a.rows() / block {
                let span = g * block * k..(g + 1) * block * k;
                let o = g * block * block..(g + 1) * block * block;
                matmul_nt_into(
                    &a.data()[span.clone()],
                    &b.data()[span],
                    &mut out.data_mut()[o],
                    *block,
                    k,
                    *block,
                );
            }
            out
        }
        Op::BlockMatMul { a, b, block } => {
            let (a, b) = (v(a), v(b));
            if *block == 0 || a.cols() != *block || a.rows() != b.rows() || a.rows() % block != 0 {
                return Err(err(format!(
                    "{:?} vs {:?}, block {block}",
                    a.shape(),
                    b.shape()
                )));
            }
            let c = b.cols();
            let mut out = Matrix::zeros(a.rows(), c);
            for g in 0..a.rows() / block {
                let sa = g * block * block..(g + 1) * block * block;
                let sb = g * block * c..(g + 1) * block * c;
                matmul_into(
                    &a.data()[sa],
                    &b.data()[sb.clone()],
                    &mut out.data_mut()[sb],
                    *block,
                    *block,
                    c,
                );
            }
            out
        }
    })
}

/// Runs forward then reverse-mode accumulation from `loss`, which must be 1×1.
///
/// Returns the loss value and the gradient for every parameter in the graph.
pub fn backward(
    graph: &Graph,
    params: &ParamStore,
    inputs: &Inputs,
    loss: NodeId,
) -> Result<(f64, Gradients)> {
    let values = forward(graph, params, inputs)?;
    let grads = backward_from(graph, &values, loss)?;
    Ok((values.get(loss).item(), grads))
}

/// Reverse pass over already computed values.
pub fn backward_from(graph: &Graph, values: &Values, loss: NodeId) -> Result<Gradients> {
    let loss_val = values.get(loss);
    if loss_val.shape() != (1, 1) {
        return Err(DiffError::NonScalarLoss(loss_val.shape()));
    }
    let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Matrix::scalar(1.0));
    let mut out = Gradients::new();

    for id in (0..=loss.0).rev() {
        let Some(g) = grads[id].take() else {
            continue;
        };
        let op = &graph.ops[id];
        let val = values.get(NodeId(id));
        let v = |n: &NodeId| values.get(*n);
        let acc =
            |n: NodeId, contrib: Matrix, grads: &mut Vec<Option<Matrix>>| match &mut grads[n.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
        match op {
            Op::Input(_) => {}
            Op::Parameter(name) => {
                out.insert(name.clone(), g);
            }
            Op::MatMul(a, b) => {
                let (am, bm) = (v(a), v(b));
                let (r, k, c) = (am.rows(), am.cols(), bm.cols());
                let mut ga = Matrix::zeros(r, k);
                matmul_nt_into(g.data(), bm.data(), ga.data_mut(), r, c, k);
                let mut gb = Matrix::zeros(k, c);
                matmul_tn_into(am.data(), g.data(), gb.data_mut(), r, k, c);
                acc(*a, ga, &mut grads);
                acc(*b, gb, &mut grads);
            }
            Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
            Op::Add(a, b) => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                acc(*a, reduce_to(&g, sa), &mut grads);
                acc(*b, reduce_to(&g, sb), &mut grads);
            }
            Op::Mul(a, b) => {
                let (am, bm) = (v(a), v(b));
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                let mut gb = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let gv = g.get(r, c);
                        ga.set(r, c, gv * broadcast_index(bm, r, c));
                        gb.set(r, c, gv * broadcast_index(am, r, c));
                    }
                }
                acc(*a, reduce_to(&ga, am.shape()), &mut grads);
                acc(*b, reduce_to(&gb, bm.shape()), &mut grads);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s), &mut grads),
            Op::Neg(a) => acc(*a, g.map(|x| -x), &mut grads),
            Op::Relu(a) => {
                let x = v(a);
                let mut ga = g;
                for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(*a, ga, &mut grads);
            }
            Op::Exp(a) => {
                let mut ga = g;
                for (gv, y) in ga.data_mut().iter_mut().zip(val.data()) {
                    *gv *= y;
                }
                acc(*a, ga, &mut grads);
            }
            Op::Log(a) => {
                let mut ga = g;
                for (gv, x) in ga.data_mut().iter_mut().zip(v(a).data()) {
                    *gv /= x;
                }
                acc(*a, ga, &mut grads);
            }
            Op::LayerNorm(a) => {
                let x = v(a);
                let n = x.cols() as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (gy, y) = (g.row(r), val.row(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = dot(gy, y) / n;
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*a, ga, &mut grads);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(val.rows(), val.cols());
                for r in 0..val.rows() {
                    let (gy, y) = (g.row(r), val.row(r));
                    let s = dot(gy, y);
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*a, ga, &mut grads);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(val.rows(), val.cols());
                for r in 0..val.rows() {
                    let (gy, y) = (g.row(r), val.row(r));
                    let s: f64 = gy.iter().sum();
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = gv - yv.exp() * s;
                    }
                }
                acc(*a, ga, &mut grads);
            }
            Op::MeanRows { input, block } => {
                let x = v(input);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let src = g.row(r / block);
                    for (o, gv) in ga.row_mut(r).iter_mut().zip(src) {
                        *o = gv / *block as f64;
                    }
                }
                acc(*input, ga, &mut grads);
            }
            Op::Sum(a) => {
                let (r, c) = v(a).shape();
                acc(*a, Matrix::filled(r, c, g.item()), &mut grads);
            }
            Op::Mean(a) => {
                let (r, c) = v(a).shape();
                acc(
                    *a,
                    Matrix::filled(r, c, g.item() / (r * c) as f64),
                    &mut grads,
                );
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = v(p).shape();
                    let part = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    acc(*p, part, &mut grads);
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = v(p).shape();
                    let mut part = Matrix::zeros(r, c);
                    for i in 0..r {
                        part.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    acc(*p, part, &mut grads);
                    off += c;
                }
            }
            Op::SliceRows { input, start, .. } => {
                let (r, c) = v(input).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                acc(*input, ga, &mut grads);
            }
            Op::SliceCols { input, start, len } => {
                let (r, c) = v(input).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                acc(*input, ga, &mut grads);
            }
            Op::CosineRows(a, b) => {
                let (am, bm) = (v(a), v(b));
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                for r in 0..am.rows() {
                    let (x, y) = (am.row(r), bm.row(r));
                    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                    let denom = nx * ny + COSINE_EPS;
                    let s = dot(x, y);
                    let gv = g.get(r, 0);
                    // d/dx [s / (|x||y| + eps)] = y/D - s |y| x / (|x| D^2)
                    let cx = if nx > 0.0 {
                        s * ny / (nx * denom * denom)
                    } else {
                        0.0
                    };
                    let cy = if ny > 0.0 {
                        s * nx / (ny * denom * denom)
                    } else {
                        0.0
                    };
                    for (i, (o, yv)) in ga.row_mut(r).iter_mut().zip(y).enumerate() {
                        *o = gv * (yv / denom - cx * x[i]);
                    }
                    for (i, (o, xv)) in gb.row_mut(r).iter_mut().zip(x).enumerate() {
                        *o = gv * (xv / denom - cy * y[i]);
                    }
                }
                acc(*a, ga, &mut grads);
                acc(*b, gb, &mut grads);
            }
            Op::TileRows { input, times } => {
                let (r, c) = v(input).shape();
                let mut ga = Matrix::zeros(r, c);
                for t in 0..*times {
                    let chunk = &g.data()[t * r * c..(t + 1) * r * c];
                    for (o, gv) in ga.data_mut().iter_mut().zip(chunk) {
                        *o += gv;
                    }
                }
                acc(*input, ga, &mut grads);
            }
            Op::Reshape { input, .. } => {
                let (r, c) = v(input).shape();
                acc(*input, Matrix::from_vec(r, c, g.into_data()), &mut grads);
            }
            Op::BlockMatMulNT { a, b, block } => {
                // out_g = A_g B_gᵀ; dA_g = G_g B_g, dB_g = G_gᵀ A_g
                let (am, bm) = (v(a), v(b));
                let k = am.cols();
                let mut ga = Matrix::zeros(am.rows(), k);
                let mut gb = Matrix::zeros(bm.rows(), k);
                for grp in 0..am.rows() / block {
                    let span = grp * block * k..(grp + 1) * block * k;
                    let gs = grp * block * block..(grp + 1) * block * block;
                    matmul_into(
                        &g.data()[gs.clone()],
                        &bm.data()[span.clone()],
                        &mut ga.data_mut()[span.clone()],
                        *block,
                        *block,
                        k,
                    );
                    matmul_tn_into(
                        &g.data()[gs],
                        &am.data()[span.clone()],
                        &mut gb.data_mut()[span],
                        *block,
                        *block,
                        k,
                    );
                }
                acc(*a, ga, &mut grads);
                acc(*b, gb, &mut grads);
            }
            Op::BlockMatMul { a, b, block } => {
                // out_g = A_g B_g; dA_g = G_g B_gᵀ, dB_g = A_gᵀ G_g
                let (am, bm) = (v(a), v(b));
                let c = bm.cols();
                let mut ga = Matrix::zeros(am.rows(), *block);
                let mut gb = Matrix::zeros(bm.rows(), c);
                for grp in 0..am.rows() / block {
                    let sa = grp * block * block..(grp + 1) * block * block;
                    let sb = grp * block * c..(grp + 1) * block * c;
                    matmul_nt_into(
                        &g.data()[sb.clone()],
                        &bm.data()[sb.clone()],
                        &mut ga.data_mut()[sa.clone()],
                        *block,
                        c,
                        *block,
                    );
                    matmul_tn_into(
                        &am.data()[sa],
                        &g.data()[sb.clone()],
                        &mut gb.data_mut()[sb],
                        *block,
                        *block,
                        c,
                    );
                }
                acc(*a, ga, &mut grads);
                acc(*b, gb, &mut grads);
            }
        }
    }
    Ok(out)
}
