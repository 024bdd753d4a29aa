//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a linear tape: every operation appends a node holding its
//! forward value and enough context to compute a vector-Jacobian product.
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints into
//! leaf gradient buffers. Leaf gradients persist across calls, so running
//! backward twice without [`Graph::zero_grad`] doubles them.

use crate::error::{Error, Result};

use super::tensor::numel;
use super::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding(Var, Vec<usize>),
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gather(Var, Vec<usize>, usize),
    Sum(Var),
    MaskedSum(Var, Vec<bool>),
    MaskedMean(Var, Vec<bool>, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Single-threaded gradient tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

fn check_finite<T: Scalar>(op: &'static str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Numpy-style broadcast of two shapes. Returns the output shape and, for each
/// operand that is not already output-shaped, a flat index map.
#[allow(clippy::type_complexity)]
fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
    if a == b {
        return Ok((a.to_vec(), None, None));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        }
    }
    let map_for = |p: &[usize]| -> Option<Vec<usize>> {
        if p == out.as_slice() {
            return None;
        }
        let n = numel(&out);
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            strides[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Some(map)
    };
    let (ma, mb) = (map_for(&pa), map_for(&pb));
    Ok((out, ma, mb))
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = numel(shape).checked_div(cols).unwrap_or(0);
    (rows, cols)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid_f<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_f<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// Snapshot of a node as a standalone tensor (without gradient).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- leaves ----------------------------------------------------------

    /// Inserts a tensor as a leaf; it participates in gradients iff
    /// `tensor.requires_grad`.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
        )
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    /// Copies the value of `x` into a new node that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(Op::Leaf, shape, value, false)
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Option<Vec<usize>>, Option<Vec<usize>>) -> Op<T>,
    ) -> Result<Var> {
        let (shape, ma, mb) = broadcast(op, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let n = numel(&shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value: Vec<T> = (0..n).map(|i| f(va[at(&ma, i)], vb[at(&mb, i)])).collect();
        check_finite(op, &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(ma, mb), shape, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |ma, mb| Op::Add(a, b, ma, mb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |ma, mb| Op::Sub(a, b, ma, mb))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |ma, mb| Op::Mul(a, b, ma, mb))
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        check_finite(op, &value)?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(node, shape, value, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::cast_from(GELU_C);
        let k = T::cast_from(0.044_715);
        let half = T::cast_from(0.5);
        self.unary(
            "gelu",
            x,
            |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid_f, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus_f, Op::Softplus(x))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![T::zero(); m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        check_finite("matmul", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), vec![c, r], out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if numel(s) != numel(&shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: s.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), shape, value, rg))
    }

    /// Row lookup: `table[V×d]`, indices `[n]` → `[n×d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = &self.nodes[table.0].shape;
        if s.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("index {bad} out of range for {v} rows")));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Op::Embedding(table, indices.to_vec()), vec![indices.len(), d], out, rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_of(&shape);
        let v = &self.nodes[x.0].value;
        let n = T::cast_from(cols as f64);
        let eps = T::cast_from(eps);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &a) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
            inv_std.push(is);
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::LayerNorm(x, inv_std), shape, out, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_of(&shape);
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for (oi, &a) in o.iter_mut().zip(row) {
                *oi = (a - m).exp();
                z = z + *oi;
            }
            o.iter_mut().for_each(|oi| *oi = *oi / z);
        }
        check_finite("softmax", &out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x), shape, out, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_of(&shape);
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&a| (a - m).exp()).sum::<T>().ln();
            for (o, &a) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = a - lse;
            }
        }
        check_finite("log_softmax", &out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::LogSoftmax(x), shape, out, rg))
    }

    // ---- indexing --------------------------------------------------------

    fn gather_impl(&mut self, x: Var, indices: &[usize], per_row: usize, squeeze: bool) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::invalid("gather", "cannot gather from a scalar"));
        }
        let (rows, cols) = rows_of(&shape);
        if indices.len() != rows * per_row {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for last axis {cols}")));
        }
        let v = &self.nodes[x.0].value;
        let out: Vec<T> = indices
            .iter()
            .enumerate()
            .map(|(j, &c)| v[(j / per_row) * cols + c])
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if !squeeze {
            out_shape.push(per_row);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Gather(x, indices.to_vec(), per_row), out_shape, out, rg))
    }

    /// Picks one entry per row along the last axis: `[.., V]` → `[..]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.gather_impl(x, indices, 1, true)
    }

    /// Picks `per_row` entries per row along the last axis: `[.., V]` → `[.., per_row]`.
    pub fn gather_last_k(&mut self, x: Var, indices: &[usize], per_row: usize) -> Result<Var> {
        self.gather_impl(x, indices, per_row, false)
    }

    /// Top-k along the last axis, descending, ties to the lower index.
    /// Values are differentiable; indices are not.
    pub fn topk(&mut self, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_of(&shape);
        if k == 0 || k > cols {
            return Err(Error::invalid("topk", format!("k={k} invalid for last axis {cols}")));
        }
        let v = &self.nodes[x.0].value;
        let mut idx = Vec::with_capacity(rows * k);
        for r in 0..rows {
            idx.extend(topk_indices(&v[r * cols..(r + 1) * cols], k));
        }
        let values = self.gather_last_k(x, &idx, k)?;
        Ok((values, idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::invalid("slice_cols", format!("[{start}, {end}) on {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let w = end - start;
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols(x, start, end), vec![r, w], out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.nodes[first.0].shape.first().copied().unwrap_or(0);
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let c = self.nodes[p.0].shape[1];
                out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, total], out, rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().copied().sum::<T>();
        check_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Op::Sum(x), vec![], vec![s], rg))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: &[bool]) -> Result<()> {
        if mask.len() != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        Ok(())
    }

    /// Sum over positions where `mask` is set.
    pub fn masked_sum(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask("masked_sum", x, mask)?;
        let v = &self.nodes[x.0].value;
        let s = v
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&a, _)| a)
            .sum::<T>();
        check_finite("masked_sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaskedSum(x, mask.to_vec()), vec![], vec![s], rg))
    }

    /// Mean over positions where `mask` is set; zero when nothing is valid.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_mask("masked_mean", x, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let v = &self.nodes[x.0].value;
        let s = v
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&a, _)| a)
            .sum::<T>();
        let mean = if count == 0 {
            T::zero()
        } else {
            s / T::cast_from(count as f64)
        };
        check_finite("masked_mean", &[mean])?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaskedMean(x, mask.to_vec(), count), vec![], vec![mean], rg))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into every gradient-requiring leaf. `loss` must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.node_backward(i, &gout, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = &mut self.leaf_grads[i];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &g)| *a = *a + g),
                    None => *slot = Some(gout),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Adds into the adjoint of `v` if it participates in gradients.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    let $g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                with_grad!(*a, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[at(ma, j)] = g[at(ma, j)] + d;
                    }
                });
                with_grad!(*b, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[at(mb, j)] = g[at(mb, j)] + sign * d;
                    }
                });
            }
            Op::Mul(a, b, ma, mb) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[at(ma, j)] = g[at(ma, j)] + d * vb[at(mb, j)];
                    }
                });
                with_grad!(*b, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[at(mb, j)] = g[at(mb, j)] + d * va[at(ma, j)];
                    }
                });
            }
            Op::Scale(x, c) => with_grad!(*x, |g| {
                g.iter_mut().zip(gout).for_each(|(a, &d)| *a = *a + d * *c);
            }),
            Op::AddScalar(x) | Op::Reshape(x) => with_grad!(*x, |g| {
                g.iter_mut().zip(gout).for_each(|(a, &d)| *a = *a + d);
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |g| {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        let drow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            let dot = drow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                            g[r * k + p] = g[r * k + p] + dot;
                        }
                    }
                });
                with_grad!(*b, |g| {
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        let drow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va[r * k + p];
                            let grow = &mut g[p * n..(p + 1) * n];
                            grow.iter_mut().zip(drow).for_each(|(o, &d)| *o = *o + av * d);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                with_grad!(*x, |g| {
                    for i2 in 0..r {
                        for j in 0..c {
                            g[i2 * c + j] = g[i2 * c + j] + gout[j * r + i2];
                        }
                    }
                });
            }
            Op::Embedding(table, idx) => {
                let d = node.shape[1];
                with_grad!(*table, |g| {
                    for (row, &t) in idx.iter().enumerate() {
                        let src = &gout[row * d..(row + 1) * d];
                        g[t * d..(t + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &s)| *a = *a + s);
                    }
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let (rows, cols) = rows_of(&node.shape);
                let y = &node.value;
                let n = T::cast_from(cols as f64);
                with_grad!(*x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &gout[r * cols..(r + 1) * cols];
                        let mean_d = dr.iter().copied().sum::<T>() / n;
                        let mean_dy = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / n;
                        for c in 0..cols {
                            let j = r * cols + c;
                            g[j] = g[j] + inv_std[r] * (dr[c] - mean_d - yr[c] * mean_dy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                let c = T::cast_from(GELU_C);
                let k = T::cast_from(0.044_715);
                let half = T::cast_from(0.5);
                let three = T::cast_from(3.0);
                with_grad!(*x, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        let v = xv[j];
                        let th = (c * (v + k * v * v * v)).tanh();
                        let dinner = c * (T::one() + three * k * v * v);
                        let dv = half * (T::one() + th) + half * v * (T::one() - th * th) * dinner;
                        g[j] = g[j] + d * dv;
                    }
                });
            }
            Op::Softmax(x) => {
                let (rows, cols) = rows_of(&node.shape);
                let y = &node.value;
                with_grad!(*x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &gout[r * cols..(r + 1) * cols];
                        let dot = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>();
                        for c in 0..cols {
                            let j = r * cols + c;
                            g[j] = g[j] + yr[c] * (dr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = rows_of(&node.shape);
                let y = &node.value;
                with_grad!(*x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dr = &gout[r * cols..(r + 1) * cols];
                        let total = dr.iter().copied().sum::<T>();
                        for c in 0..cols {
                            let j = r * cols + c;
                            g[j] = g[j] + dr[c] - yr[c].exp() * total;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                with_grad!(*x, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[j] = g[j] + d * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                with_grad!(*x, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[j] = g[j] + d * y[j];
                    }
                });
            }
            Op::Log(x) => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[j] = g[j] + d / xv[j];
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[j] = g[j] + d * sigmoid_f(xv[j]);
                    }
                });
            }
            Op::Gather(x, idx, per_row) => {
                let cols = *nodes[x.0].shape.last().expect("gather rank");
                with_grad!(*x, |g| {
                    for (j, (&c, &d)) in idx.iter().zip(gout).enumerate() {
                        let t = (j / per_row) * cols + c;
                        g[t] = g[t] + d;
                    }
                });
            }
            Op::Sum(x) => with_grad!(*x, |g| {
                g.iter_mut().for_each(|a| *a = *a + gout[0]);
            }),
            Op::MaskedSum(x, mask) => with_grad!(*x, |g| {
                for (a, &m) in g.iter_mut().zip(mask) {
                    if m {
                        *a = *a + gout[0];
                    }
                }
            }),
            Op::MaskedMean(x, mask, count) => {
                if *count > 0 {
                    let w = gout[0] / T::cast_from(*count as f64);
                    with_grad!(*x, |g| {
                        for (a, &m) in g.iter_mut().zip(mask) {
                            if m {
                                *a = *a + w;
                            }
                        }
                    });
                }
            }
            Op::SliceCols(x, start, end) => {
                let c = nodes[x.0].shape[1];
                let w = end - start;
                with_grad!(*x, |g| {
                    for r in 0..node.shape[0] {
                        for j in 0..w {
                            let t = r * c + start + j;
                            g[t] = g[t] + gout[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    with_grad!(p, |g| {
                        for r in 0..node.shape[0] {
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + gout[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
        }
    }
}

/// Indices of the `k` largest entries, descending; equal values keep the
/// lower index first.
pub fn topk_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort on descending value leaves ties in index order.
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}
