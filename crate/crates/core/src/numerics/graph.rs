//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a tracked leaf. Constants
//! never receive a gradient, which is how frozen weights are expressed.

use std::cell::RefCell;

use crate::numerics::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_in_place};
use crate::numerics::{NumericsError, Result, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout { x: Var, mask: Vec<T> },
    TopKRenorm { probs: Var, selection: Vec<Vec<usize>> },
    SelectedSoftmax { logits: Var, selection: Vec<Vec<usize>> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Softmax(a) | Op::Sum(a) | Op::MeanRows(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SliceCols { x, .. } | Op::SliceRows { x, .. } | Op::SelectRows { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Dropout { x, .. } => vec![*x],
            Op::TopKRenorm { probs, .. } => vec![*probs],
            Op::SelectedSoftmax { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation tape. Single-writer; build one per forward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` is untracked or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose tracking follows `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push_raw(tensor, Op::Leaf, tracked)
    }

    /// Tracked leaf.
    pub fn param(&self, tensor: Tensor<T>) -> Var {
        self.push_raw(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    /// Untracked leaf; never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.push_raw(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// First element of a node's value (loss read-out).
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].tracked)
        };
        self.push_raw(value, op, tracked)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].value.rows(), nodes[v.0].value.cols())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_nt(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.sub(&nodes[b.0].value)?
        };
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_with(&nodes[b.0].value, "mul", |x, y| x * y)?
        };
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            if rv.rows() != 1 || rv.cols() != av.cols() {
                return Err(NumericsError::shape("add_row", av.shape(), rv.shape()));
            }
            let n = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + rv.data()[i % n])
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Scales row `i` of `a (m x n)` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
            if cv.cols() != 1 || cv.rows() != av.rows() {
                return Err(NumericsError::shape("mul_col", av.shape(), cv.shape()));
            }
            let n = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * cv.data()[i / n])
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.with_value(a, |v| v.scale(c));
        self.push(out, Op::Scale(a, c))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let out = self.with_value(a, |v| v.map(|x| x / (T::one() + (-x).exp())));
        self.push(out, Op::Silu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |v| v.softmax(1))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise softmax of a square score matrix where entry `(i, j)` with
    /// `j > i` is masked out (probability exactly zero).
    pub fn causal_softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            if v.rows() != v.cols() {
                return Err(NumericsError::shape("causal_softmax", v.shape(), v.shape()));
            }
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { op: "causal_softmax" });
            }
            let n = v.cols();
            let mut data = v.data().to_vec();
            for (i, row) in data.chunks_mut(n).enumerate() {
                softmax_in_place(&mut row[..=i]);
                for x in &mut row[i + 1..] {
                    *x = T::zero();
                }
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Per-row layer normalization with affine `gain` and `bias` (both `1 x n`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let n = xv.cols();
            if gv.shape() != [1, n] || bv.shape() != [1, n] {
                return Err(NumericsError::shape("layer_norm", xv.shape(), gv.shape()));
            }
            let nt = T::of_usize(n);
            let mut xhat = Vec::with_capacity(xv.len());
            let mut inv_std = Vec::with_capacity(xv.rows());
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if len == 0 || start + len > v.cols() {
                return Err(NumericsError::IndexOutOfRange {
                    index: start + len,
                    bound: v.cols(),
                });
            }
            let mut data = Vec::with_capacity(v.rows() * len);
            for r in 0..v.rows() {
                data.extend_from_slice(&v.row_slice(r)[start..start + len]);
            }
            Tensor::new(vec![v.rows(), len], data)?
        };
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or(NumericsError::EmptyInput { op: "concat_cols" })?.0].value;
            let rows = first.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows {
                    return Err(NumericsError::shape("concat_cols", first.shape(), v.shape()));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row_slice(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if len == 0 || start + len > v.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    index: start + len,
                    bound: v.rows(),
                });
            }
            let c = v.cols();
            Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?
        };
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or(NumericsError::EmptyInput { op: "concat_rows" })?.0].value;
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(NumericsError::shape("concat_rows", first.shape(), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers rows by index (embedding lookup, last-position selection).
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let c = v.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= v.rows() {
                    return Err(NumericsError::IndexOutOfRange {
                        index: r,
                        bound: v.rows(),
                    });
                }
                data.extend_from_slice(v.row_slice(r));
            }
            Tensor::new(vec![rows.len(), c], data)?
        };
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.with_value(x, |v| v.sum()));
        self.push(out, Op::Sum(x))
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| {
            let (m, n) = (v.rows(), v.cols());
            let mut acc = vec![T::zero(); n];
            for row in v.data().chunks(n) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            let mt = T::of_usize(m);
            Tensor::row(&acc.into_iter().map(|a| a / mt).collect::<Vec<_>>())
        });
        self.push(out, Op::MeanRows(x))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as `1 x 1`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[logits.0].value;
            if targets.len() != v.rows() {
                return Err(NumericsError::shape("cross_entropy", v.shape(), &[targets.len()]));
            }
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { op: "cross_entropy" });
            }
            let n = v.cols();
            let mut probs = v.data().to_vec();
            let mut total = T::zero();
            for (r, row) in probs.chunks_mut(n).enumerate() {
                let t = targets[r];
                if t >= n {
                    return Err(NumericsError::IndexOutOfRange { index: t, bound: n });
                }
                total += crate::numerics::tensor::neg_log_softmax(row, t);
                softmax_in_place(row);
            }
            (total / T::of_usize(targets.len()), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Multiplies by a fixed mask (already holding the `1/(1-p)` scale).
    pub fn dropout(&self, x: Var, mask: Vec<T>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if mask.len() != v.len() {
                return Err(NumericsError::shape("dropout", v.shape(), &[mask.len()]));
            }
            let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Dense `m x N` fusion weights: `probs[r][i] / sum_{j in sel[r]} probs[r][j]`
    /// for selected `i`, exactly zero elsewhere.
    pub fn topk_renorm(&self, probs: Var, selection: Vec<Vec<usize>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[probs.0].value;
            check_selection(v, &selection)?;
            let n = v.cols();
            let mut data = vec![T::zero(); v.len()];
            for (r, sel) in selection.iter().enumerate() {
                let row = v.row_slice(r);
                let z: T = sel.iter().map(|&i| row[i]).sum();
                for &i in sel {
                    data[r * n + i] = row[i] / z;
                }
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::TopKRenorm { probs, selection }))
    }

    /// Dense `m x N` weights from a softmax restricted to the selected logits.
    pub fn selected_softmax(&self, logits: Var, selection: Vec<Vec<usize>>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[logits.0].value;
            check_selection(v, &selection)?;
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { op: "selected_softmax" });
            }
            let n = v.cols();
            let mut data = vec![T::zero(); v.len()];
            for (r, sel) in selection.iter().enumerate() {
                let row = v.row_slice(r);
                let mut picked: Vec<T> = sel.iter().map(|&i| row[i]).collect();
                softmax_in_place(&mut picked);
                for (&i, p) in sel.iter().zip(picked) {
                    data[r * n + i] = p;
                }
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::SelectedSoftmax { logits, selection }))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(NumericsError::shape("backward", loss_node.value.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !loss_node.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(loss_node.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, delta: Tensor<T>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta).expect("gradient shape"),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).cols();
                    if nodes[a.0].tracked {
                        let da = matmul_nt_kernel(gd, val(*b).data(), m, n, k);
                        send(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[b.0].tracked {
                        let db = matmul_tn_kernel(val(*a).data(), gd, m, k, n);
                        send(*b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).rows();
                    if nodes[a.0].tracked {
                        let da = matmul_kernel(gd, val(*b).data(), m, n, k);
                        send(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[b.0].tracked {
                        let db = matmul_tn_kernel(gd, val(*a).data(), m, n, k);
                        send(*b, Tensor::new(vec![n, k], db)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].tracked {
                        send(*a, g.zip_with(val(*b), "mul", |x, y| x * y)?);
                    }
                    if nodes[b.0].tracked {
                        send(*b, g.zip_with(val(*a), "mul", |x, y| x * y)?);
                    }
                }
                Op::AddRow(a, row) => {
                    send(*a, g.clone());
                    if nodes[row.0].tracked {
                        let n = g.cols();
                        let mut acc = vec![T::zero(); n];
                        for r in gd.chunks(n) {
                            for (s, &x) in acc.iter_mut().zip(r) {
                                *s += x;
                            }
                        }
                        send(*row, Tensor::row(&acc));
                    }
                }
                Op::MulCol(a, col) => {
                    let n = g.cols();
                    let (av, cv) = (val(*a), val(*col));
                    if nodes[a.0].tracked {
                        let da = gd.iter().enumerate().map(|(i, &x)| x * cv.data()[i / n]).collect();
                        send(*a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if nodes[col.0].tracked {
                        let dc: Vec<T> = gd
                            .chunks(n)
                            .zip(av.data().chunks(n))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                            .collect();
                        send(*col, Tensor::new(cv.shape().to_vec(), dc)?);
                    }
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Silu(a) => {
                    let dx = g.zip_with(val(*a), "silu", |gv, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gv * s * (T::one() + x * (T::one() - s))
                    })?;
                    send(*a, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut dx = Vec::with_capacity(y.len());
                    for (gr, yr) in gd.chunks(n).zip(y.data().chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&p, &q)| q * (p - dot)));
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = g.cols();
                    let gain_v = val(*gain).data();
                    if nodes[x.0].tracked {
                        let nt = T::of_usize(n);
                        let mut dx = Vec::with_capacity(g.len());
                        for (r, (gr, hr)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            let dh: Vec<T> = gr.iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                            let s1: T = dh.iter().copied().sum();
                            let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                            let inv = inv_std[r];
                            dx.extend(
                                dh.iter()
                                    .zip(hr)
                                    .map(|(&d, &h)| inv / nt * (nt * d - s1 - h * s2)),
                            );
                        }
                        send(*x, Tensor::new(g.shape().to_vec(), dx)?);
                    }
                    if nodes[gain.0].tracked {
                        let mut dg = vec![T::zero(); n];
                        for (gr, hr) in gd.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        send(*gain, Tensor::row(&dg));
                    }
                    if nodes[bias.0].tracked {
                        let mut db = vec![T::zero(); n];
                        for gr in gd.chunks(n) {
                            for j in 0..n {
                                db[j] += gr[j];
                            }
                        }
                        send(*bias, Tensor::row(&db));
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (c, len) = (xv.cols(), g.cols());
                    let mut dx = vec![T::zero(); xv.len()];
                    for (r, gr) in gd.chunks(len).enumerate() {
                        dx[r * c + start..r * c + start + len].copy_from_slice(gr);
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = val(*p).cols();
                        if nodes[p.0].tracked {
                            let mut dp = Vec::with_capacity(g.rows() * pc);
                            for gr in gd.chunks(total) {
                                dp.extend_from_slice(&gr[offset..offset + pc]);
                            }
                            send(*p, Tensor::new(vec![g.rows(), pc], dp)?);
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut dx = vec![T::zero(); xv.len()];
                    dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pr = val(*p).rows();
                        if nodes[p.0].tracked {
                            let dp = gd[offset * c..(offset + pr) * c].to_vec();
                            send(*p, Tensor::new(vec![pr, c], dp)?);
                        }
                        offset += pr;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut dx = vec![T::zero(); xv.len()];
                    for (gr, &r) in gd.chunks(c).zip(rows) {
                        for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Sum(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(*x, Tensor::filled(&shape, gd[0]));
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let mt = T::of_usize(m);
                    let dx = (0..m * n).map(|i| gd[i % n] / mt).collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = val(*logits);
                    let n = lv.cols();
                    let scale = gd[0] / T::of_usize(targets.len());
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * n + t] -= T::one();
                    }
                    for d in &mut dl {
                        *d *= scale;
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), dl)?);
                }
                Op::Dropout { x, mask } => {
                    let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::TopKRenorm { probs, selection } => {
                    let pv = val(*probs);
                    let n = pv.cols();
                    let out = node.value.data();
                    let mut dp = vec![T::zero(); pv.len()];
                    for (r, sel) in selection.iter().enumerate() {
                        let row = pv.row_slice(r);
                        let z: T = sel.iter().map(|&i| row[i]).sum();
                        let dot: T = sel.iter().map(|&i| gd[r * n + i] * out[r * n + i]).sum();
                        for &j in sel {
                            dp[r * n + j] = (gd[r * n + j] - dot) / z;
                        }
                    }
                    send(*probs, Tensor::new(pv.shape().to_vec(), dp)?);
                }
                Op::SelectedSoftmax { logits, selection } => {
                    let lv = val(*logits);
                    let n = lv.cols();
                    let out = node.value.data();
                    let mut dl = vec![T::zero(); lv.len()];
                    for (r, sel) in selection.iter().enumerate() {
                        let dot: T = sel.iter().map(|&i| gd[r * n + i] * out[r * n + i]).sum();
                        for &j in sel {
                            dl[r * n + j] = out[r * n + j] * (gd[r * n + j] - dot);
                        }
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), dl)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// `rows x cols` of a node, for callers building shaped constants.
    pub fn dims_of(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }
}

fn check_selection<T: Scalar>(v: &Tensor<T>, selection: &[Vec<usize>]) -> Result<()> {
    if selection.len() != v.rows() {
        return Err(NumericsError::shape("selection", v.shape(), &[selection.len()]));
    }
    for sel in selection {
        if sel.is_empty() {
            return Err(NumericsError::EmptyInput { op: "selection" });
        }
        if let Some(&bad) = sel.iter().find(|&&i| i >= v.cols()) {
            return Err(NumericsError::IndexOutOfRange {
                index: bad,
                bound: v.cols(),
            });
        }
    }
    Ok(())
}
