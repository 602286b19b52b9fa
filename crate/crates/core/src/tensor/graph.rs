//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted and backward is a single reverse sweep.
//! Parameters are bound into the graph by [`ParamId`]; after
//! [`Graph::backward`] their gradients are accumulated into the owning
//! [`Params`] table.

use std::collections::HashMap;

use super::scalar::gemm;
use super::tensor::numel;
use super::{ParamId, Params, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive sentinel used in place of negative infinity inside masks.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Vec<T> },
    Scale { a: Var, s: T },
    GatherRows { table: Var, idx: Vec<usize> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    GatherElems { a: Var, idx: Vec<usize> },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::GatherElems { .. } => "gather_elems",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by a backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

fn softmax_row<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_row<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in x.iter_mut() {
        *v -= lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: op.name().to_string() });
        }
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.nodes[v.0].value.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Usage(format!("node of shape {:?} is not a scalar", self.shape(v)))),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Bind a parameter; repeated binds of the same id return the same node.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let t = params.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    // ----- forward catalog -------------------------------------------------

    /// `a @ b` (or `a @ b^T` with `trans_b`) for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (need 2-D)")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} trans_b={trans_b}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b, m, k, n }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg)
    }

    /// Broadcast-add a 1-D `bias` over the leading axes of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(a).chunks(cols.max(1)).flat_map(|r| r.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let rg = self.rg(a) || self.rg(bias);
        self.push(self.shape(a).to_vec(), out, Op::AddRow { a, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", format!("{:?} * [{}]", self.shape(a), c.len())));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::MulConst { a, c }, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, rg)
    }

    /// Embedding lookup: rows `idx` of the 2-D `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {shape:?} is not 2-D")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        self.push(vec![idx.len(), cols], out, Op::GatherRows { table, idx: idx.to_vec() }, rg)
    }

    /// Softmax along the last axis after adding `mask` (0 or [`MASK_NEG`]).
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[T]>) -> Result<Var> {
        let mut out = self.value(a).to_vec();
        if let Some(m) = mask {
            if m.len() != out.len() {
                return Err(Error::shape("softmax", format!("mask [{}] vs input {:?}", m.len(), self.shape(a))));
            }
            out.iter_mut().zip(m).for_each(|(x, &m)| *x += m);
        }
        let (_, cols) = rows_cols(self.shape(a));
        out.chunks_mut(cols.max(1)).for_each(softmax_row);
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).to_vec();
        let (_, cols) = rows_cols(self.shape(a));
        out.chunks_mut(cols.max(1)).for_each(log_softmax_row);
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { a }, rg)
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against integer
    /// labels. Zero rows yield a constant zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if rows != labels.len() {
            return Err(Error::shape("cross_entropy", format!("{rows} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {cols} classes")));
        }
        if rows == 0 {
            return self.push(vec![], vec![T::zero()], Op::Leaf, false);
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(cols).zip(labels) {
            log_softmax_row(row);
            loss -= row[y];
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        loss /= T::lit(rows as f64);
        let rg = self.rg(logits);
        self.push(vec![], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Layer normalization along the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x }, rg)
    }

    /// Column-wise maximum over the rows of a 2-D tensor. Ties go to the
    /// lowest row index, which is also where the gradient is routed.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("max_pool_rows", format!("need non-empty 2-D input, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xs = self.value(x);
        let mut out = xs[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = xs[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![cols], out, Op::MaxPoolRows { x, argmax }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean { a }, rg)
    }

    /// Pick elements by flat index.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_elems", format!("index {bad} out of range for {n} elements")));
        }
        let out = idx.iter().map(|&i| self.value(a)[i]).collect();
        let rg = self.rg(a);
        self.push(vec![idx.len()], out, Op::GatherElems { a, idx: idx.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let cols = shape[1];
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.push(vec![len, cols], out, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[1],
            _ => return Err(Error::shape("concat_rows", "need at least one 2-D part")),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", format!("part {s:?} vs {cols} columns")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, cols], out, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {shape:?}", start + len)));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xs = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(vec![rows, len], out, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(Error::shape("concat_cols", "need at least one 2-D part")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("part {s:?} vs {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, total], out, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Reshape { a }, rg)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss`, accumulating into the `grad` slot of every
    /// trainable parameter bound in this graph.
    pub fn backward(&self, loss: Var, params: &mut Params<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.bound {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(v) {
                let slot = t.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                slot.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                if self.rg(a) {
                    // dA = dC op(B)^T
                    let ga = acc(grads, a, m * k);
                    gemm(m, n, k, gy, false, self.value(b), !trans_b, ga, true);
                }
                if self.rg(b) {
                    let gb = acc(grads, b, k * n);
                    if trans_b {
                        // B stored n x k: dB = dC^T A
                        gemm(n, m, k, gy, true, self.value(a), false, gb, true);
                    } else {
                        // dB = A^T dC
                        gemm(k, m, n, self.value(a), true, gy, false, gb, true);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(v) {
                        add_into(acc(grads, v, gy.len()), gy);
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if self.rg(a) {
                    add_into(acc(grads, a, gy.len()), gy);
                }
                if self.rg(bias) {
                    let cols = self.value(bias).len();
                    let gb = acc(grads, bias, cols);
                    for row in gy.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let ga = acc(grads, a, gy.len());
                    for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(self.value(b)) {
                        *g += d * y;
                    }
                }
                if self.rg(b) {
                    let gb = acc(grads, b, gy.len());
                    for ((g, &d), &x) in gb.iter_mut().zip(gy).zip(self.value(a)) {
                        *g += d * x;
                    }
                }
            }
            Op::MulConst { a, c } => {
                let ga = acc(grads, *a, gy.len());
                for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(c) {
                    *g += d * y;
                }
            }
            &Op::Scale { a, s } => {
                let ga = acc(grads, a, gy.len());
                for (g, &d) in ga.iter_mut().zip(gy) {
                    *g += d * s;
                }
            }
            Op::GatherRows { table, idx } => {
                let n = self.value(*table).len();
                let cols = node.shape[1];
                let gt = acc(grads, *table, n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gt[i * cols..(i + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                }
            }
            &Op::Softmax { a } => {
                let (_, cols) = rows_cols(&node.shape);
                let ga = acc(grads, a, gy.len());
                for ((g, dy), y) in ga.chunks_mut(cols).zip(gy.chunks(cols)).zip(node.value.chunks(cols)) {
                    let dot: T = dy.iter().zip(y).map(|(&d, &p)| d * p).sum();
                    for ((g, &d), &p) in g.iter_mut().zip(dy).zip(y) {
                        *g += p * (d - dot);
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let (_, cols) = rows_cols(&node.shape);
                let ga = acc(grads, a, gy.len());
                for ((g, dy), y) in ga.chunks_mut(cols).zip(gy.chunks(cols)).zip(node.value.chunks(cols)) {
                    let total: T = dy.iter().copied().sum();
                    for ((g, &d), &l) in g.iter_mut().zip(dy).zip(y) {
                        *g += d - l.exp() * total;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, cols) = rows_cols(self.shape(*logits));
                let s = gy[0] / T::lit(rows as f64);
                let gl = acc(grads, *logits, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    let row = &mut gl[r * cols..(r + 1) * cols];
                    for (g, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *g += s * p;
                    }
                    row[y] -= s;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (_, cols) = rows_cols(&node.shape);
                let g = self.value(*gain);
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, cols);
                    for (dy, h) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((a, &d), &h) in gg.iter_mut().zip(dy).zip(h) {
                            *a += d * h;
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, cols);
                    for dy in gy.chunks(cols) {
                        add_into(gb, dy);
                    }
                }
                if self.rg(*x) {
                    let n = T::lit(cols as f64);
                    let gx = acc(grads, *x, gy.len());
                    let mut dh = vec![T::zero(); cols];
                    for (r, ((gxr, dy), h)) in
                        gx.chunks_mut(cols).zip(gy.chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                    {
                        for c in 0..cols {
                            dh[c] = dy[c] * g[c];
                        }
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let k = rstd[r] / n;
                        for c in 0..cols {
                            gxr[c] += k * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let gx = acc(grads, x, gy.len());
                for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(self.value(x)) {
                    let u = c * (v + a * v * v * v);
                    let t = u.tanh();
                    let du = c * (T::one() + three * a * v * v);
                    let dgelu = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    *g += d * dgelu;
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let cols = argmax.len();
                let gx = acc(grads, *x, self.value(*x).len());
                for (c, (&r, &d)) in argmax.iter().zip(gy).enumerate() {
                    gx[r * cols + c] += d;
                }
            }
            &Op::Sum { a } => {
                let ga = acc(grads, a, self.value(a).len());
                ga.iter_mut().for_each(|g| *g += gy[0]);
            }
            &Op::Mean { a } => {
                let n = self.value(a).len();
                let s = gy[0] / T::lit(n as f64);
                let ga = acc(grads, a, n);
                ga.iter_mut().for_each(|g| *g += s);
            }
            Op::GatherElems { a, idx } => {
                let ga = acc(grads, *a, self.value(*a).len());
                for (&i, &d) in idx.iter().zip(gy) {
                    ga[i] += d;
                }
            }
            &Op::SliceRows { a, start } => {
                let cols = node.shape[1];
                let ga = acc(grads, a, self.value(a).len());
                add_into(&mut ga[start * cols..start * cols + gy.len()], gy);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        add_into(acc(grads, p, n), &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceCols { a, start } => {
                let (rows, len) = (node.shape[0], node.shape[1]);
                let cols = self.shape(a)[1];
                let ga = acc(grads, a, rows * cols);
                for r in 0..rows {
                    add_into(&mut ga[r * cols + start..r * cols + start + len], &gy[r * len..(r + 1) * len]);
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &gy[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::Reshape { a } => {
                add_into(acc(grads, a, gy.len()), gy);
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Row-wise softmax of a plain slice, outside any graph.
pub fn softmax_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_row(&mut out);
    out
}

/// Row-wise log-softmax of a plain slice, outside any graph.
pub fn log_softmax_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    log_softmax_row(&mut out);
    out
}

#[cfg(test)]
mod tests;
