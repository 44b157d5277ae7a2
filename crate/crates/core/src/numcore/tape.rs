//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends one node to the [`Tape`]; node indices are a
//! topological order, so the backward pass is a single reverse sweep.

use std::rc::Rc;

use super::gemm::{gemm, Layout};
use super::{NdArray, NumError, Real};
use crate::interp;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-mixing linear map stored in compressed sparse rows:
/// `out[o, :] = sum_w w * in[src, :]`.
#[derive(Clone, Debug)]
pub struct SparseMap {
    n_out: usize,
    n_in: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<Real>,
}

impl SparseMap {
    /// Trilinear resampling of a `from` grid of rows onto a `to` grid.
    pub fn trilinear(from: [usize; 3], to: [usize; 3]) -> Self {
        let scale = [0, 1, 2].map(|a| from[a] as f64 / to[a] as f64);
        Self::build(from, to, scale)
    }

    /// Trilinear upsampling of a patch grid to voxel resolution.
    pub fn upsample(grid: [usize; 3], factor: usize) -> Self {
        let to = grid.map(|g| g * factor);
        Self::build(grid, to, [1.0 / factor as f64; 3])
    }

    fn build(from: [usize; 3], to: [usize; 3], scale: [f64; 3]) -> Self {
        let n_out: usize = to.iter().product();
        let mut offsets = Vec::with_capacity(n_out + 1);
        let mut cols = Vec::with_capacity(n_out * 8);
        let mut weights = Vec::with_capacity(n_out * 8);
        offsets.push(0);
        let mut current = 0;
        interp::for_each_trilinear(from, to, scale, |o, src, w| {
            while current < o {
                offsets.push(cols.len());
                current += 1;
            }
            cols.push(src);
            weights.push(w as Real);
        });
        while offsets.len() < n_out + 1 {
            offsets.push(cols.len());
        }
        Self { n_out, n_in: from.iter().product(), offsets, cols, weights }
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    /// Apply to a row-major `n_in x width` buffer.
    pub fn apply(&self, input: &[Real], width: usize) -> Vec<Real> {
        let mut out = vec![0.0; self.n_out * width];
        for o in 0..self.n_out {
            let dst = &mut out[o * width..(o + 1) * width];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = self.weights[t];
                let src = &input[self.cols[t] * width..(self.cols[t] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose_into(&self, grad_out: &[Real], width: usize, grad_in: &mut [Real]) {
        for o in 0..self.n_out {
            let src = &grad_out[o * width..(o + 1) * width];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = self.weights[t];
                let dst = &mut grad_in[self.cols[t] * width..(self.cols[t] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, Real),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Real>, rstd: Vec<Real> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, target: NdArray, row_weights: Vec<Real>, probs: Vec<Real> },
    L2Loss { a: Var, b: Var, mask: Option<Vec<bool>>, count: usize },
    L2NormalizeRows { x: Var, norms: Vec<Real> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Resample { x: Var, map: Rc<SparseMap> },
    SoftDice { probs: Var, target: NdArray, channels: Vec<usize>, smooth: Real },
    Reshape(Var),
    Attention { qkv: Var, heads: usize, scale: Real, probs: Vec<Vec<Real>> },
}

/// Gradient buffer for `v`, created on first use; `None` for non-grad nodes.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<NdArray>], v: Var) -> Option<&'g mut NdArray> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| NdArray::zeros(node.value.shape())))
}

struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Linear record of primitive operations, confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    uses: Vec<usize>,
}

const SQRT_2: Real = std::f64::consts::SQRT_2 as Real;
const INV_SQRT_2PI: Real = 0.398_942_280_401_432_7 as Real;

fn erf(x: Real) -> Real {
    libm::erf(x as f64) as Real
}

fn check_same_shape(op: &'static str, a: &NdArray, b: &NdArray) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

fn matrix_2d(op: &'static str, a: &NdArray, b: &NdArray) -> Result<(), NumError> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(NumError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

fn softmax_rows(x: &[Real], cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[Real], cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = src.iter().map(|&s| (s - max).exp()).sum::<Real>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        let inputs: Vec<Var> = match &op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::MatMulBt { a, b } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::L2Loss { a, b, .. } => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::CrossEntropy { logits: x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Resample { x, .. }
            | Op::SoftDice { probs: x, .. }
            | Op::Attention { qkv: x, .. } => vec![*x],
        };
        for v in inputs {
            self.uses[v.0] += 1;
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.uses.push(0);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many recorded ops consumed `v` as an input.
    pub fn use_count(&self, v: Var) -> usize {
        self.uses[v.0]
    }

    /// Number of nodes (leaf or not) that carry gradient.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        matrix_2d("matmul", va, vb)?;
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        if vb.shape()[0] != k {
            return Err(NumError::Shape { op: "matmul", lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), Layout::row_major(k), vb.data(), Layout::row_major(n), 0.0, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::from_vec(&[m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        matrix_2d("matmul_bt", va, vb)?;
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        if vb.shape()[1] != k {
            return Err(NumError::Shape { op: "matmul_bt", lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), Layout::row_major(k), vb.data(), Layout::transposed(k), 0.0, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::from_vec(&[m, n], out)?, Op::MatMulBt { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(NumError::Rank { op: "transpose", expected: 2, shape: v.shape().to_vec() });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let out = NdArray::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Broadcast-add a 1-D `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumError> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (_, cols) = vx.matrix_dims();
        if vr.ndim() != 1 || vr.len() != cols {
            return Err(NumError::Shape { op: "add_row", lhs: vx.shape().to_vec(), rhs: vr.shape().to_vec() });
        }
        let mut out = vx.clone();
        let r = vr.data();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + erf(v / SQRT_2)));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var, NumError> {
        let vx = self.value(x);
        let (rows, cols) = vx.matrix_dims();
        if cols == 0 {
            return Err(NumError::Rank { op: "layernorm", expected: 1, shape: vx.shape().to_vec() });
        }
        for p in [gain, bias] {
            let vp = self.value(p);
            if vp.ndim() != 1 || vp.len() != cols {
                return Err(NumError::Shape { op: "layernorm", lhs: vx.shape().to_vec(), rhs: vp.shape().to_vec() });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = &vx.data()[r * cols..(r + 1) * cols];
            let mean = src.iter().sum::<Real>() / cols as Real;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..cols {
                let h = (src[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = NdArray::from_vec(vx.shape(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let vx = self.value(x);
        if !vx.is_finite() {
            return Err(NumError::NonFinite { op: "softmax" });
        }
        let (_, cols) = vx.matrix_dims();
        let out = NdArray::from_vec(vx.shape(), softmax_rows(vx.data(), cols))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let vx = self.value(x);
        if !vx.is_finite() {
            return Err(NumError::NonFinite { op: "log_softmax" });
        }
        let (_, cols) = vx.matrix_dims();
        let out = NdArray::from_vec(vx.shape(), log_softmax_rows(vx.data(), cols))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Row-wise `-sum_k t_k log softmax(logits)_k`, averaged over rows with
    /// optional per-row weights (normalized by the weight total).
    pub fn cross_entropy(
        &mut self,
        target: &NdArray,
        logits: Var,
        row_weights: Option<&[Real]>,
    ) -> Result<Var, NumError> {
        let vl = self.value(logits);
        let (rows, cols) = vl.matrix_dims();
        if target.matrix_dims() != (rows, cols) {
            return Err(NumError::Shape {
                op: "cross_entropy",
                lhs: target.shape().to_vec(),
                rhs: vl.shape().to_vec(),
            });
        }
        if !vl.is_finite() {
            return Err(NumError::NonFinite { op: "cross_entropy" });
        }
        let weights: Vec<Real> = match row_weights {
            Some(w) if w.len() != rows => {
                return Err(NumError::Shape { op: "cross_entropy", lhs: vec![w.len()], rhs: vec![rows] })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total_w: Real = weights.iter().sum();
        if rows == 0 || total_w <= 0.0 {
            return Err(NumError::InvalidArgument("cross_entropy needs positive total row weight".into()));
        }
        let logp = log_softmax_rows(vl.data(), cols);
        let mut loss = 0.0;
        for r in 0..rows {
            let mut row = 0.0;
            for c in 0..cols {
                let t = target.data()[r * cols + c];
                if t != 0.0 {
                    row -= t * logp[r * cols + c];
                }
            }
            loss += weights[r] * row;
        }
        loss /= total_w;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let row_weights = weights.iter().map(|w| w / total_w).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            NdArray::scalar(loss),
            Op::CrossEntropy { logits, target: target.clone(), row_weights, probs },
            rg,
        ))
    }

    /// Mean squared difference over the positions selected by `mask`
    /// (all positions when `None`).
    pub fn l2_loss(&mut self, a: Var, b: Var, mask: Option<&[bool]>) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("l2_loss", va, vb)?;
        if let Some(m) = mask {
            if m.len() != va.len() {
                return Err(NumError::Shape { op: "l2_loss", lhs: va.shape().to_vec(), rhs: vec![m.len()] });
            }
        }
        let selected = |i: usize| mask.is_none_or(|m| m[i]);
        let mut count = 0usize;
        let mut total = 0.0;
        for (i, (x, y)) in va.data().iter().zip(vb.data()).enumerate() {
            if selected(i) {
                count += 1;
                total += (x - y) * (x - y);
            }
        }
        if count == 0 {
            return Err(NumError::EmptyMask);
        }
        let out = NdArray::scalar(total / count as Real);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::L2Loss { a, b, mask: mask.map(<[bool]>::to_vec), count }, rg))
    }

    /// Scale each row to unit Euclidean norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.matrix_dims();
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = self.value(parts[0]).matrix_dims().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.matrix_dims();
            if c != cols {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(NdArray::from_vec(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let v = self.value(x);
        let (rows, cols) = v.matrix_dims();
        if start + len > rows {
            return Err(NumError::Shape { op: "slice_rows", lhs: v.shape().to_vec(), rhs: vec![start, len] });
        }
        let out = NdArray::from_vec(&[len, cols], v.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.value(parts[0]).matrix_dims().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims();
            if r != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(NdArray::from_vec(&[rows, cols], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let v = self.value(x);
        let (rows, cols) = v.matrix_dims();
        if start + len > cols {
            return Err(NumError::Shape { op: "slice_cols", lhs: v.shape().to_vec(), rhs: vec![start, len] });
        }
        let d = v.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(NdArray::from_vec(&[rows, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = NdArray::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = NdArray::scalar(v.sum() / v.len() as Real);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mix the rows of `x` (`n_in x width`) through a sparse linear map.
    pub fn resample(&mut self, x: Var, map: Rc<SparseMap>) -> Result<Var, NumError> {
        let v = self.value(x);
        let (rows, width) = v.matrix_dims();
        if rows != map.n_in() {
            return Err(NumError::Shape {
                op: "resample",
                lhs: v.shape().to_vec(),
                rhs: vec![map.n_in(), map.n_out()],
            });
        }
        let out = NdArray::from_vec(&[map.n_out(), width], map.apply(v.data(), width))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Resample { x, map }, rg))
    }

    /// `1 - mean_c (2 I_c + s) / (P_c + T_c + s)` over the listed channels,
    /// for `probs` and one-hot `target` shaped `voxels x channels`.
    pub fn soft_dice_loss(
        &mut self,
        probs: Var,
        target: &NdArray,
        channels: &[usize],
        smooth: Real,
    ) -> Result<Var, NumError> {
        let vp = self.value(probs);
        check_same_shape("soft_dice_loss", vp, target)?;
        let (rows, cols) = vp.matrix_dims();
        if channels.is_empty() || channels.iter().any(|&c| c >= cols) {
            return Err(NumError::InvalidArgument(format!("dice channels {channels:?} for {cols} columns")));
        }
        let mut dice_sum = 0.0;
        for &c in channels {
            let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                let (p, t) = (vp.data()[r * cols + c], target.data()[r * cols + c]);
                inter += p * t;
                ps += p;
                ts += t;
            }
            dice_sum += (2.0 * inter + smooth) / (ps + ts + smooth);
        }
        let loss = 1.0 - dice_sum / channels.len() as Real;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            NdArray::scalar(loss),
            Op::SoftDice { probs, target: target.clone(), channels: channels.to_vec(), smooth },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `N x 3D` holding queries, keys and values side by side; head
    /// `h` uses columns `h*D/heads ..` of each. Returns the `N x D`
    /// concatenation of head outputs. Attention weights are kept only when
    /// a gradient is required.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var, NumError> {
        let v = self.value(qkv);
        let (n, width) = v.matrix_dims();
        if v.ndim() != 2 || heads == 0 || width % (3 * heads) != 0 {
            return Err(NumError::Shape { op: "attention", lhs: v.shape().to_vec(), rhs: vec![heads] });
        }
        if !v.is_finite() {
            return Err(NumError::NonFinite { op: "attention" });
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let q_layout = Layout { rs: width as isize, cs: 1 };
        let kt_layout = Layout { rs: 1, cs: width as isize };
        let data = v.data();
        let rg = self.any_grad(&[qkv]);
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(if rg { heads } else { 0 });
        let mut p = vec![0.0; n * n];
        let mut head_out = vec![0.0; n * dh];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            gemm(n, dh, n, scale, &data[qo..], q_layout, &data[ko..], kt_layout, 0.0, &mut p);
            p = softmax_rows(&p, n);
            gemm(n, n, dh, 1.0, &p, Layout::row_major(n), &data[vo..], q_layout, 0.0, &mut head_out);
            for r in 0..n {
                out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&head_out[r * dh..(r + 1) * dh]);
            }
            if rg {
                probs.push(p.clone());
            }
        }
        let out = NdArray::from_vec(&[n, d], out)?;
        Ok(self.push(out, Op::Attention { qkv, heads, scale, probs }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        if self.value(root).len() != 1 {
            return Err(NumError::Rank { op: "backward", expected: 0, shape: self.value(root).shape().to_vec() });
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(NdArray::full(self.value(root).shape(), 1.0));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Attention { qkv, heads, scale, probs } => {
                let data = self.value(*qkv).data();
                let (n, width) = self.value(*qkv).matrix_dims();
                let d = width / 3;
                let dh = d / heads;
                let Some(gq) = slot(&self.nodes, grads, *qkv) else {
                    return;
                };
                let in_layout = Layout { rs: width as isize, cs: 1 };
                let vt_layout = Layout { rs: 1, cs: width as isize };
                let g_layout = Layout { rs: d as isize, cs: 1 };
                let mut tmp = vec![0.0; n * dh];
                let mut dp = vec![0.0; n * n];
                let gqd = gq.data_mut();
                for (h, p) in probs.iter().enumerate() {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    let go = &gd[h * dh..];
                    let mut scatter = |tmp: &[Real], offset: usize| {
                        for r in 0..n {
                            for c in 0..dh {
                                gqd[r * width + offset + c] += tmp[r * dh + c];
                            }
                        }
                    };
                    gemm(n, n, dh, 1.0, p, Layout::transposed(n), go, g_layout, 0.0, &mut tmp);
                    scatter(&tmp, vo);
                    gemm(n, dh, n, 1.0, go, g_layout, &data[vo..], vt_layout, 0.0, &mut dp);
                    for r in 0..n {
                        let (pr, dr) = (&p[r * n..(r + 1) * n], &mut dp[r * n..(r + 1) * n]);
                        let dot: Real = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pv) in dr.iter_mut().zip(pr) {
                            *d = pv * (*d - dot);
                        }
                    }
                    gemm(n, n, dh, *scale, &dp, Layout::row_major(n), &data[ko..], in_layout, 0.0, &mut tmp);
                    scatter(&tmp, qo);
                    gemm(n, n, dh, *scale, &dp, Layout::transposed(n), &data[qo..], in_layout, 0.0, &mut tmp);
                    scatter(&tmp, ko);
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    gemm(m, n, k, 1.0, gd, Layout::row_major(n), vb.data(), Layout::transposed(n), 1.0, ga.data_mut());
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    gemm(k, m, n, 1.0, va.data(), Layout::transposed(k), gd, Layout::row_major(n), 1.0, gb.data_mut());
                }
            }
            Op::MatMulBt { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    gemm(m, n, k, 1.0, gd, Layout::row_major(n), vb.data(), Layout::row_major(k), 1.0, ga.data_mut());
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    gemm(n, m, k, 1.0, gd, Layout::transposed(n), va.data(), Layout::row_major(k), 1.0, gb.data_mut());
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    // g is c x r
                    for i in 0..r {
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for (d, s) in gb.data_mut().iter_mut().zip(gd) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for ((d, s), y) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for ((d, s), x) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.add_assign(g);
                }
                let cols = self.value(*row).len();
                if let Some(gr) = slot(&self.nodes, grads, *row) {
                    for chunk in gd.chunks(cols) {
                        for (d, s) in gr.data_mut().iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (d, s) in gx.data_mut().iter_mut().zip(gd) {
                        *d += c * s;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, s), &v) in gx.data_mut().iter_mut().zip(gd).zip(vx) {
                        let cdf = 0.5 * (1.0 + erf(v / SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        *d += s * (cdf + v * pdf);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let dy = &gd[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = dy[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= cols as Real;
                        mean_dxh_xh /= cols as Real;
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let dxh = dy[c] * gv[c];
                            dst[c] += inv * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(gg) = slot(&self.nodes, grads, *gain) {
                    for (dy, xh) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg.data_mut()[c] += dy[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *bias) {
                    for dy in gd.chunks(cols) {
                        for (d, s) in gb.data_mut().iter_mut().zip(dy) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((dst, dy), yr) in gx.data_mut().chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: Real = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dst[c] += yr[c] * (dy[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let cols = node.value.matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((dst, dy), yr) in gx.data_mut().chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let total: Real = dy.iter().sum();
                        for c in 0..cols {
                            dst[c] += dy[c] - yr[c].exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, row_weights, probs } => {
                let cols = self.value(*logits).matrix_dims().1;
                let up = gd[0];
                if let Some(gl) = slot(&self.nodes, grads, *logits) {
                    let t = target.data();
                    for (r, w) in row_weights.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let t_sum: Real = t[span.clone()].iter().sum();
                        for i in span {
                            gl.data_mut()[i] += up * w * (probs[i] * t_sum - t[i]);
                        }
                    }
                }
            }
            Op::L2Loss { a, b, mask, count } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let factor = 2.0 * gd[0] / *count as Real;
                let selected = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for (i, d) in ga.data_mut().iter_mut().enumerate() {
                        if selected(i) {
                            *d += factor * (va[i] - vb[i]);
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for (i, d) in gb.data_mut().iter_mut().enumerate() {
                        if selected(i) {
                            *d -= factor * (va[i] - vb[i]);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let cols = node.value.matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, dy) = (&y[span.clone()], &gd[span.clone()]);
                        let floored = n <= 1e-12;
                        let dot: Real = if floored { 0.0 } else { yr.iter().zip(dy).map(|(a, b)| a * b).sum() };
                        let dst = &mut gx.data_mut()[span];
                        for c in 0..cols {
                            dst[c] += (dy[c] - yr[c] * dot) / n;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = slot(&self.nodes, grads, p) {
                        for (d, s) in gp.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                            *d += s;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let dst = &mut gx.data_mut()[start * cols..start * cols + gd.len()];
                    for (d, s) in dst.iter_mut().zip(gd) {
                        *d += s;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).matrix_dims().1;
                    if let Some(gp) = slot(&self.nodes, grads, p) {
                        for r in 0..rows {
                            let src = &gd[r * cols + offset..r * cols + offset + w];
                            for (d, s) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.matrix_dims();
                let cols = self.value(*x).matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for r in 0..rows {
                        let dst = &mut gx.data_mut()[r * cols + start..r * cols + start + len];
                        for (d, s) in dst.iter_mut().zip(&gd[r * len..(r + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for d in gx.data_mut() {
                        *d += gd[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as Real;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for d in gx.data_mut() {
                        *d += gd[0] / n;
                    }
                }
            }
            Op::Resample { x, map } => {
                let width = node.value.matrix_dims().1;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    map.apply_transpose_into(gd, width, gx.data_mut());
                }
            }
            Op::SoftDice { probs, target, channels, smooth } => {
                let vp = self.value(*probs);
                let (rows, cols) = vp.matrix_dims();
                let up = gd[0];
                if let Some(gp) = slot(&self.nodes, grads, *probs) {
                    let scale = up / channels.len() as Real;
                    for &c in channels {
                        let (mut inter, mut denom) = (0.0, *smooth);
                        for r in 0..rows {
                            let (p, t) = (vp.data()[r * cols + c], target.data()[r * cols + c]);
                            inter += p * t;
                            denom += p + t;
                        }
                        let numer = 2.0 * inter + smooth;
                        for r in 0..rows {
                            let t = target.data()[r * cols + c];
                            gp.data_mut()[r * cols + c] -= scale * (2.0 * t * denom - numer) / (denom * denom);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (d, s) in gx.data_mut().iter_mut().zip(gd) {
                        *d += s;
                    }
                }
            }
        }
    }
}
