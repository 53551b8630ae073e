//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs are earlier
//! nodes, so the node order is already a topological order. The tape is built
//! fresh for every forward pass and never mutated in place. Leaves are either
//! trainable parameters or constants; constants (and everything computed only
//! from constants) are skipped during the backward sweep.

use std::borrow::Cow;

use super::{Matrix, NumericsError, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable op kinds the graph knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Tanh,
    Gelu,
    LayerNorm,
    CausalSoftmax,
    SliceCols,
    ConcatCols,
    GatherRows,
    Reshape,
    Transpose,
    Sum,
    CrossEntropy,
    MaskMul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    CausalSoftmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
    },
    MaskMul {
        x: NodeId,
        mask: Matrix<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MaskMul { .. } => OpKind::MaskMul,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::CausalSoftmax(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SliceCols { x, .. } | Op::MaskMul { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. Borrowed leaves (`param_ref`, `constant_ref`) let large
/// frozen weights enter the graph without copying.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Matrix<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf (owned).
    pub fn param(&mut self, m: Matrix<T>) -> NodeId {
        self.leaf(Cow::Owned(m), true)
    }

    /// Trainable leaf (borrowed).
    pub fn param_ref(&mut self, m: &'a Matrix<T>) -> NodeId {
        self.leaf(Cow::Borrowed(m), true)
    }

    /// Non-differentiated leaf (owned).
    pub fn constant(&mut self, m: Matrix<T>) -> NodeId {
        self.leaf(Cow::Owned(m), false)
    }

    /// Non-differentiated leaf (borrowed).
    pub fn constant_ref(&mut self, m: &'a Matrix<T>) -> NodeId {
        self.leaf(Cow::Borrowed(m), false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Cow::Owned(v), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Cow::Owned(v), Op::Scale(a, s))
    }

    /// Adds a `1×c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: xv.shape(),
                right: rv.shape(),
            });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, row)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Cow::Owned(v), Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
        let half = T::lit(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(Cow::Owned(v), Op::Gelu(a))
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let n = T::lit(c as f64);
        let mut xhat = Matrix::zeros(xv.rows(), c);
        let mut out = Matrix::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax of a square score matrix with entries above the
    /// diagonal masked out (row `i` attends to columns `0..=i`).
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_softmax",
                left: av.shape(),
                right: av.shape(),
            });
        }
        let n = av.rows();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let row = &av.row(i)[..=i];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out.set(i, j, e);
                z = z + e;
            }
            for j in 0..=i {
                out.set(i, j, out.get(i, j) / z);
            }
        }
        Ok(self.push(Cow::Owned(out), Op::CausalSoftmax(a)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let v = Matrix::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        Ok(self.push(Cow::Owned(v), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, NumericsError> {
        let rows = xs.first().map_or(0, |&x| self.value(x).rows());
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, total),
                    right: v.shape(),
                });
            }
            total += v.cols();
        }
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &x in xs {
            let v = self.value(x);
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(xs.to_vec())))
    }

    /// Selects rows of `table` (an embedding lookup when `table` is an
    /// embedding matrix).
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId, NumericsError> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(NumericsError::IndexOutOfRange {
                index: bad,
                len: tv.rows(),
            });
        }
        let mut out = Matrix::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(
            Cow::Owned(out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, NumericsError> {
        let v = self.value(x).reshape(rows, cols)?;
        Ok(self.push(Cow::Owned(v), Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(Cow::Owned(v), Op::Transpose(x))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Cow::Owned(Matrix::filled(1, 1, s)), Op::Sum(x))
    }

    /// Summed softmax cross-entropy over the rows that carry a target; rows
    /// with `None` contribute nothing. Returns a `1×1` node.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, NumericsError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_sum",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= lv.cols() {
                return Err(NumericsError::IndexOutOfRange {
                    index: t,
                    len: lv.cols(),
                });
            }
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss = loss + lse - row[t];
            for (j, &v) in row.iter().enumerate() {
                probs.set(i, j, (v - lse).exp());
            }
        }
        Ok(self.push(
            Cow::Owned(Matrix::filled(1, 1, loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Multiplies `x` element-wise by a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: NodeId, mask: Matrix<T>) -> Result<NodeId, NumericsError> {
        let v = self.value(x).hadamard(&mask)?;
        Ok(self.push(Cow::Owned(v), Op::MaskMul { x, mask }))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumericsError::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let inputs = node.op.inputs();
            if inputs.iter().any(|i| i.0 >= idx) {
                return Err(NumericsError::Cycle { node: idx });
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if self.wants(*row) {
                    accumulate(grads, *row, column_sums(g))?;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let t = y.get(i, j);
                    g.get(i, j) * (T::one() - t * t)
                });
                accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let v = x.get(i, j);
                    let u = c * (v + k * v * v * v);
                    let t = u.tanh();
                    let du = c * (T::one() + three * k * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    g.get(i, j) * dy
                });
                accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let c = xhat.cols();
                let n = T::lit(c as f64);
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(g.rows(), c);
                    for i in 0..g.rows() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dh = g.get(i, j) * gv.data()[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat.get(i, j);
                        }
                        for j in 0..c {
                            let dh = g.get(i, j) * gv.data()[j];
                            let v = inv_std[i] / n * (n * dh - s1 - xhat.get(i, j) * s2);
                            dx.set(i, j, v);
                        }
                    }
                    accumulate(grads, *x, dx)?;
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, column_sums(&g.hadamard(xhat)?))?;
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, column_sums(g))?;
                }
            }
            Op::CausalSoftmax(a) => {
                let y = &node.value;
                let n = y.rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    let dot: T = (0..=i).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..=i {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, d)?;
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if self.wants(x) {
                        let d = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        accumulate(grads, x, d)?;
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *table, d)?;
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, g.reshape(r, c)?)?;
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose())?,
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.get(0, 0);
                let mut d = probs.scale(s);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        d.set(i, t, d.get(i, t) - s);
                    }
                }
                accumulate(grads, *logits, d)?;
            }
            Op::MaskMul { x, mask } => accumulate(grads, *x, g.hadamard(mask)?)?,
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) -> Result<(), NumericsError> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`, if the loss depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id` given its shape; zero when the loss does not reach
    /// the node.
    pub fn wrt(&self, id: NodeId, shape: (usize, usize)) -> Matrix<T> {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
