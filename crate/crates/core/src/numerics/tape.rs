//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and enough context to apply its vector-Jacobian product. Nodes are
//! appended in execution order, so the reverse sweep is a plain descending
//! walk over node indices.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// `scale · a · bᵀ`
    MatMulBt { a: Var, b: Var, scale: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `b` broadcast over the leading axes of `a`.
    AddBroadcast { a: Var, b: Var },
    /// Tensor times a scalar variable.
    MulScalar { a: Var, s: Var },
    Affine { a: Var, mul: f64 },
    Tanh { a: Var },
    /// Keeps the inner `tanh` of every element for the backward pass.
    Gelu { a: Var, t: Vec<f64> },
    Sum { a: Var },
    Dot { a: Var, b: Var },
    Outer { a: Var, b: Var },
    Element { a: Var, index: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxSegments { a: Var, bounds: Vec<usize> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropySum { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    /// Per-head causal attention over stacked sequences; `probs` holds each
    /// sequence's full `len×len` matrix per head, zeros above the diagonal.
    CausalHeads { q: Var, k: Var, v: Var, lens: Vec<usize>, heads: usize, probs: Vec<f64> },
    /// Per-head gated attention over a shared prefix; `probs` is `heads×rows×n`.
    PrefixHeads { q: Var, kp: Var, vp: Var, w: Var, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// Leaves borrow their tensors, so frozen weights enter the tape without a
/// copy. A tape supports exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Adds the gradient of `var` into `target`'s grad buffer, allocating
    /// a zeroed buffer if needed.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        if self.shapes[var.0] != target.shape() {
            return Err(Error::dim("accumulate_into", &self.shapes[var.0], target.shape()));
        }
        match &self.grads[var.0] {
            Some(g) => target.accumulate_grad(g),
            None => {
                target.grad_mut();
                Ok(())
            }
        }
    }

    /// Indices of the operation nodes visited by the reverse sweep, in visit order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax of `row[start..end]` written into `out[start..end]`, using only
/// the first `visible` columns of the segment. Hidden columns get 0.
fn softmax_span(row: &[f64], out: &mut [f64], start: usize, end: usize, visible: usize) {
    let stop = start + visible.min(end - start);
    let max = row[start..stop].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in start..stop {
        let e = (row[j] - max).exp();
        out[j] = e;
        total += e;
    }
    for x in &mut out[start..stop] {
        *x /= total;
    }
    for x in &mut out[stop..end] {
        *x = 0.0;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `trainable` decides whether it collects a gradient.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    // Linear algebra -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, ta.data(), k, 1, tb.data(), n, 1, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `scale · a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, scale, ta.data(), k, 1, tb.data(), 1, k, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMulBt { a, b, scale }, &[a, b]))
    }

    /// Scaled dot-product `a·bᵀ/√H` where `H` is the shared column count.
    pub fn scaled_dot_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let h = *self.value(a).shape().last().unwrap_or(&1) as f64;
        self.matmul_bt(a, b, 1.0 / h.sqrt())
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Error::dim("outer", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.numel(), tb.numel());
        let mut data = Vec::with_capacity(m * n);
        for &x in ta.data() {
            data.extend(tb.data().iter().map(|&y| x * y));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Outer { a, b }, &[a, b]))
    }

    // Elementwise ------------------------------------------------------------

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s (a bias row over a matrix, or an `n×H` matrix over a batch).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_broadcast", sa, sb));
        }
        let block = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::AddBroadcast { a, b }, &[a, b]))
    }

    /// Multiplies every entry of `a` by the single-element variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::dim("mul_scalar", self.value(a).shape(), ts.shape()));
        }
        let c = ts.item();
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::MulScalar { a, s }, &[a, s]))
    }

    /// `mul · a + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).map(|x| mul * x + add);
        self.push(out, Op::Affine { a, mul }, &[a])
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t: Vec<f64> = x.data().iter().map(|&v| gelu_inner_tanh(v)).collect();
        let data = x.data().iter().zip(&t).map(|(v, t)| 0.5 * v * (1.0 + t)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { a, t }, &[a])
    }

    // Reductions ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum { a }, &[a])
    }

    /// Sum of the elementwise product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("dot", ta, tb)?;
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }, &[a, b]))
    }

    /// Single entry of `a` (flat row-major index) as a scalar.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.numel() {
            return Err(Error::arg(format!("element {index} out of range for {:?}", ta.shape())));
        }
        let out = Tensor::scalar(ta.data()[index]);
        Ok(self.push(out, Op::Element { a, index }, &[a]))
    }

    // Normalization and softmax -----------------------------------------------

    /// Row-wise layer normalization over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    fn check_bounds(cols: usize, bounds: &[usize]) -> Result<()> {
        let mut prev = 0;
        for &b in bounds {
            if b <= prev || b >= cols {
                return Err(Error::arg(format!(
                    "segment boundaries {bounds:?} do not split [0, {cols}) into non-empty segments"
                )));
            }
            prev = b;
        }
        Ok(())
    }

    /// Row-wise softmax applied independently to each contiguous column
    /// segment; `bounds` lists the interior split points.
    pub fn softmax_segments(&mut self, a: Var, bounds: &[usize]) -> Result<Var> {
        self.segment_softmax(a, bounds, false)
    }

    /// Like [`Tape::softmax_segments`], but the last segment is causally
    /// masked: row `i` sees only its first `i + 1` columns. The last segment
    /// must be exactly as wide as the matrix is tall.
    pub fn softmax_segments_causal(&mut self, a: Var, bounds: &[usize]) -> Result<Var> {
        self.segment_softmax(a, bounds, true)
    }

    fn segment_softmax(&mut self, a: Var, bounds: &[usize], causal_last: bool) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2()?;
        Self::check_bounds(cols, bounds)?;
        let last_start = bounds.last().copied().unwrap_or(0);
        if causal_last && cols - last_start != rows {
            return Err(Error::dim("causal mask", &[rows, cols - last_start], &[rows, rows]));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = ta.row(r);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut start = 0;
            for &end in bounds.iter().chain(std::iter::once(&cols)) {
                let visible = if causal_last && end == cols { r + 1 } else { end - start };
                softmax_span(row, dst, start, end, visible);
                start = end;
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let op = Op::SoftmaxSegments { a, bounds: bounds.to_vec() };
        Ok(self.push(out, op, &[a]))
    }

    // Structural -----------------------------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2()?;
        if start >= end || end > rows {
            return Err(Error::arg(format!("row slice {start}..{end} of {rows} rows")));
        }
        let data = ta.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2()?;
        if start >= end || end > cols {
            return Err(Error::arg(format!("column slice {start}..{end} of {cols} columns")));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?);
        let cols = first.dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", first.shape(), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?);
        let rows = first.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", first.shape(), t.shape()));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Rows of `table` selected by `ids` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::arg("gather of no rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::arg(format!("row id {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    // Attention ------------------------------------------------------------------

    /// Multi-head causal attention over row-stacked sequences of lengths
    /// `lens`. Head `h` uses columns `h·d..(h+1)·d` of `q`, `k`, `v`, with
    /// scores scaled by `1/√d`. Rows never attend across sequences.
    pub fn causal_heads(&mut self, q: Var, k: Var, v: Var, lens: &[usize], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, cols) = tq.dims2()?;
        same_shape("causal_heads", tq, tk)?;
        same_shape("causal_heads", tq, tv)?;
        if heads == 0 || cols % heads != 0 {
            return Err(Error::arg(format!("{cols} columns do not split into {heads} heads")));
        }
        if lens.iter().sum::<usize>() != rows || lens.contains(&0) {
            return Err(Error::dim("causal_heads lengths", &[rows], lens));
        }
        let d = cols / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rows * cols];
        let mut probs = Vec::with_capacity(heads * lens.iter().map(|l| l * l).sum::<usize>());
        let mut off = 0;
        for &len in lens {
            for h in 0..heads {
                let c0 = h * d;
                for i in 0..len {
                    let qi = &qd[(off + i) * cols + c0..(off + i) * cols + c0 + d];
                    let base = probs.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(off + j) * cols + c0..(off + j) * cols + c0 + d];
                        let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(sc);
                        probs.push(sc);
                    }
                    let mut total = 0.0;
                    for p in &mut probs[base..] {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    let o = &mut out[(off + i) * cols + c0..(off + i) * cols + c0 + d];
                    for (j, p) in probs[base..].iter_mut().enumerate() {
                        *p /= total;
                        let vj = &vd[(off + j) * cols + c0..(off + j) * cols + c0 + d];
                        for (x, y) in o.iter_mut().zip(vj) {
                            *x += *p * y;
                        }
                    }
                    probs.resize(base + len, 0.0);
                }
            }
            off += len;
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let op = Op::CausalHeads { q, k, v, lens: lens.to_vec(), heads, probs };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// `Σ_h w_h · softmax(q_h·kp_hᵀ/√d) · vp_h` per head, where every row of
    /// `q` attends to all rows of the prefix. `w` holds one weight, shared by
    /// all heads, or one per head.
    pub fn prefix_heads(&mut self, q: Var, kp: Var, vp: Var, w: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv, tw) = (self.value(q), self.value(kp), self.value(vp), self.value(w));
        let (rows, cols) = tq.dims2()?;
        let (n, kc) = tk.dims2()?;
        same_shape("prefix_heads", tk, tv)?;
        if kc != cols {
            return Err(Error::dim("prefix_heads", tq.shape(), tk.shape()));
        }
        if heads == 0 || cols % heads != 0 {
            return Err(Error::arg(format!("{cols} columns do not split into {heads} heads")));
        }
        if !(tw.numel() == 1 || tw.numel() == heads) {
            return Err(Error::dim("prefix_heads weights", &[heads], tw.shape()));
        }
        let d = cols / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd, wd) = (tq.data(), tk.data(), tv.data(), tw.data());
        let mut out = vec![0.0; rows * cols];
        let mut probs = vec![0.0; heads * rows * n];
        for h in 0..heads {
            let c0 = h * d;
            let wh = wd[if wd.len() == 1 { 0 } else { h }];
            for r in 0..rows {
                let qr = &qd[r * cols + c0..r * cols + c0 + d];
                let p = &mut probs[(h * rows + r) * n..(h * rows + r + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kd[j * cols + c0..j * cols + c0 + d];
                    *pj = scale * qr.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*pj);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                let o = &mut out[r * cols + c0..r * cols + c0 + d];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= total;
                    let vj = &vd[j * cols + c0..j * cols + c0 + d];
                    for (x, y) in o.iter_mut().zip(vj) {
                        *x += wh * *pj * y;
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(out, Op::PrefixHeads { q, kp, vp, w, heads, probs }, &[q, kp, vp, w]))
    }

    // Losses -----------------------------------------------------------------------

    /// Summed next-token cross-entropy over the listed `(row, class)` pairs.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2()?;
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0;
        for &(r, c) in targets {
            if r >= rows || c >= cols {
                return Err(Error::arg(format!("target ({r}, {c}) outside logits {rows}x{cols}")));
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[c];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let op = Op::CrossEntropySum { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Mean cross-entropy over the listed `(row, class)` pairs.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::arg("cross entropy over no targets"));
        }
        let s = self.cross_entropy_sum(logits, targets)?;
        Ok(self.scale(s, 1.0 / targets.len() as f64))
    }

    // Reverse sweep ------------------------------------------------------------------

    /// Computes `∂loss/∂v` for every node that requires a gradient.
    ///
    /// The tape can be swept once; a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::state("gradient tape already consumed by a backward pass"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.apply_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn apply_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let out = &nodes[i].value;

        // Buffer for input `v`, allocated as zeros on first touch.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if wants(*a) {
                    // dA += dC · Bᵀ
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, 1.0, g, n, 1, val(*b).data(), 1, n, 1.0, da);
                }
                if wants(*b) {
                    // dB += Aᵀ · dC
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, 1.0, val(*a).data(), 1, k, g, n, 1, 1.0, db);
                }
            }
            Op::MatMulBt { a, b, scale } => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.0;
                if wants(*a) {
                    // dA += s · dC · B
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, *scale, g, n, 1, val(*b).data(), k, 1, 1.0, da);
                }
                if wants(*b) {
                    // dB += s · dCᵀ · A
                    let db = slot(grads, *b, n * k);
                    gemm(n, m, k, *scale, g, 1, n, val(*a).data(), k, 1, 1.0, db);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (d, x) in slot(grads, v, g.len()).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(*b) {
                    for (d, x) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = val(other).data();
                        for ((d, x), y) in slot(grads, v, g.len()).iter_mut().zip(g).zip(o) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if wants(*a) {
                    for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(*b) {
                    let block = val(*b).numel();
                    let db = slot(grads, *b, block);
                    for chunk in g.chunks(block) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let c = val(*s).item();
                if wants(*a) {
                    for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
                if wants(*s) {
                    let ds: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    slot(grads, *s, 1)[0] += ds;
                }
            }
            Op::Affine { a, mul } => {
                if wants(*a) {
                    for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += mul * x;
                    }
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let y = out.data();
                    for ((d, x), t) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                        *d += x * (1.0 - t * t);
                    }
                }
            }
            Op::Gelu { a, t } => {
                if wants(*a) {
                    let inp = val(*a).data();
                    for (((d, x), u), t) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(inp).zip(t) {
                        *d += x * gelu_grad(*u, *t);
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let len = val(*a).numel();
                    for d in slot(grads, *a, len).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Dot { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = val(other).data();
                        for (d, y) in slot(grads, v, o.len()).iter_mut().zip(o) {
                            *d += g[0] * y;
                        }
                    }
                }
            }
            Op::Outer { a, b } => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let n = tb.len();
                if wants(*a) {
                    let da = slot(grads, *a, ta.len());
                    for (r, d) in da.iter_mut().enumerate() {
                        *d += g[r * n..(r + 1) * n].iter().zip(tb).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, n);
                    for (r, x) in ta.iter().enumerate() {
                        for (d, gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += gv * x;
                        }
                    }
                }
            }
            Op::Element { a, index } => {
                if wants(*a) {
                    let len = val(*a).numel();
                    slot(grads, *a, len)[*index] += g[0];
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = val(*x).dims2()?;
                let gam = val(*gamma).data();
                if wants(*beta) {
                    let db = slot(grads, *beta, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, rows * cols);
                    let inv = 1.0 / cols as f64;
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv;
                        mean_dh_h *= inv;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            dx[r * cols + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SoftmaxSegments { a, bounds } => {
                if wants(*a) {
                    let (rows, cols) = out.dims2()?;
                    let y = out.data();
                    let da = slot(grads, *a, rows * cols);
                    for r in 0..rows {
                        let base = r * cols;
                        let mut start = 0;
                        for &end in bounds.iter().chain(std::iter::once(&cols)) {
                            let s: f64 = (start..end).map(|j| y[base + j] * g[base + j]).sum();
                            for j in start..end {
                                da[base + j] += y[base + j] * (g[base + j] - s);
                            }
                            start = end;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let cols = out.dims2()?.1;
                    let len = val(*a).numel();
                    let da = slot(grads, *a, len);
                    for (d, x) in da[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let (rows, w) = out.dims2()?;
                    let cols = val(*a).dims2()?.1;
                    let da = slot(grads, *a, rows * cols);
                    for r in 0..rows {
                        for c in 0..w {
                            da[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        for (d, x) in slot(grads, p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *d += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, cols) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2()?.1;
                    if wants(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * cols + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let (rows, cols) = val(*table).dims2()?;
                    let dt = slot(grads, *table, rows * cols);
                    for (k, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[id * cols + c] += g[k * cols + c];
                        }
                    }
                }
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                if wants(*logits) {
                    let (rows, cols) = val(*logits).dims2()?;
                    let dl = slot(grads, *logits, rows * cols);
                    for (k, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[k * cols..(k + 1) * cols];
                        for j in 0..cols {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            dl[r * cols + j] += g[0] * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::CausalHeads { q, k, v, lens, heads, probs } => {
                let (rows, cols) = val(*q).dims2()?;
                let d = cols / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; rows * cols];
                let mut dk = vec![0.0; rows * cols];
                let mut dv = vec![0.0; rows * cols];
                let mut ds = Vec::new();
                let (mut off, mut pbase) = (0, 0);
                for &len in lens {
                    for h in 0..*heads {
                        let c0 = h * d;
                        let at = |r: usize| (off + r) * cols + c0;
                        for i in 0..len {
                            let p = &probs[pbase + i * len..pbase + i * len + i + 1];
                            let gi = &g[at(i)..at(i) + d];
                            // dP_ij = dO_i · v_j, then the softmax Jacobian
                            ds.clear();
                            let mut dot = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                let dp: f64 = gi.iter().zip(&vd[at(j)..at(j) + d]).map(|(a, b)| a * b).sum();
                                ds.push(dp);
                                dot += pj * dp;
                                for (x, y) in dv[at(j)..at(j) + d].iter_mut().zip(gi) {
                                    *x += pj * y;
                                }
                            }
                            for (j, &pj) in p.iter().enumerate() {
                                let s = scale * pj * (ds[j] - dot);
                                for c in 0..d {
                                    dq[at(i) + c] += s * kd[at(j) + c];
                                    dk[at(j) + c] += s * qd[at(i) + c];
                                }
                            }
                        }
                        pbase += len * len;
                    }
                    off += len;
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        for (a, b) in slot(grads, var, rows * cols).iter_mut().zip(&buf) {
                            *a += b;
                        }
                    }
                }
            }
            Op::PrefixHeads { q, kp, vp, w, heads, probs } => {
                let (rows, cols) = val(*q).dims2()?;
                let n = val(*kp).dims2()?.0;
                let d = cols / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd, wd) = (val(*q).data(), val(*kp).data(), val(*vp).data(), val(*w).data());
                let mut dq = vec![0.0; rows * cols];
                let mut dk = vec![0.0; n * cols];
                let mut dv = vec![0.0; n * cols];
                let mut dw = vec![0.0; wd.len()];
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let c0 = h * d;
                    let wi = if wd.len() == 1 { 0 } else { h };
                    let wh = wd[wi];
                    for r in 0..rows {
                        let p = &probs[(h * rows + r) * n..(h * rows + r + 1) * n];
                        let gr = &g[r * cols + c0..r * cols + c0 + d];
                        let mut dot = 0.0;
                        for j in 0..n {
                            let vj = &vd[j * cols + c0..j * cols + c0 + d];
                            // unweighted dP, so the same product feeds dw
                            let raw: f64 = gr.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dw[wi] += p[j] * raw;
                            dp[j] = wh * raw;
                            dot += p[j] * dp[j];
                            for (x, y) in dv[j * cols + c0..j * cols + c0 + d].iter_mut().zip(gr) {
                                *x += wh * p[j] * y;
                            }
                        }
                        for j in 0..n {
                            let s = scale * p[j] * (dp[j] - dot);
                            for c in 0..d {
                                dq[r * cols + c0 + c] += s * kd[j * cols + c0 + c];
                                dk[j * cols + c0 + c] += s * qd[r * cols + c0 + c];
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*kp, dk), (*vp, dv), (*w, dw)] {
                    if wants(var) {
                        let len = buf.len();
                        for (a, b) in slot(grads, var, len).iter_mut().zip(&buf) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
