//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to the graph. Nodes only reference
//! earlier nodes, so reverse insertion order is a valid topological order and
//! `backward` visits each node exactly once.

use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, Layout};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Time-axis padding for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding with `(w-1)/2` rows before and the rest after; output length equals input length.
    Same,
    /// No padding; output length is `t - w + 1`.
    Valid,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    RowScale { x: Var, scales: Vec<f64> },
    ElemScale { x: Var, factors: Vec<f64> },
    Act { x: Var, act: Activation },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, kernel: Var, cols: Vec<f64>, left: usize, width: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Gather { table: Var, ids: Vec<Option<usize>> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation graph recorded during one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).matrix_dims().map_err(|_| {
            Error::dim(format!("{what}: expected a matrix, got shape {:?}", self.shape(v)))
        })
    }

    // ---- linear algebra -------------------------------------------------

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (br, bc) = self.mat_dims(b, "matmul rhs")?;
        let (kb, n, lb) = if trans_b {
            (bc, br, Layout::transposed(bc))
        } else {
            (br, bc, Layout::row_major(bc))
        };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul shapes {:?} and {:?}{} do not agree",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::row_major(k), self.value(b).data(), lb, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[D]` bias to every row of `x: [..×D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).len() != d || self.value(bias).rank() > 1 {
            return Err(Error::dim(format!(
                "bias of shape {:?} cannot be added to rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `scale·x + shift` elementwise.
    pub fn affine_scalar(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Affine { x, scale: s }, &[x])
    }

    /// Multiplies row `i` of `x` by `scales[i]`.
    pub fn row_scale(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let rows = self.value(x).outer_len();
        if scales.len() != rows {
            return Err(Error::dim(format!("row_scale: {} scales for {rows} rows", scales.len())));
        }
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        for (row, s) in v.data_mut().chunks_mut(d).zip(scales) {
            row.iter_mut().for_each(|e| *e *= s);
        }
        Ok(self.push(v, Op::RowScale { x, scales: scales.to_vec() }, &[x]))
    }

    /// Multiplies elementwise by a constant array of the same length.
    pub fn elem_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::dim("elem_scale: factor count differs from element count"));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&factors).map(|(a, f)| a * f).collect();
        let v = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(v, Op::ElemScale { x, factors }, &[x]))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x).map(|e| act.apply(e));
        self.push(v, Op::Act { x, act }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis where columns with `keep[j] == false`
    /// receive exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if let Some(k) = keep {
            if k.len() != d {
                return Err(Error::dim(format!("softmax mask has {} entries for axis of {d}", k.len())));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Numeric("softmax row is fully masked".into()));
            }
        }
        if v.data().iter().any(|e| e.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row, keep);
        }
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Normalizes each row of `x: [..×D]` to zero mean and unit variance,
    /// then applies `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(p).len() != d {
                return Err(Error::dim(format!(
                    "layer_norm {name} of shape {:?} for rows of {d}",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.outer_len();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    // ---- convolution and pooling ------------------------------------------

    /// Cross-correlation along time: `y[t, o] = Σ_w Σ_c x[t + w - left, c] · k[w, c, o]`
    /// for `x: [T×Cin]` and `kernel: [W×Cin×Cout]`. The kernel is not flipped.
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (t, cin) = self.mat_dims(x, "conv1d input")?;
        let kshape = self.shape(kernel).to_vec();
        let [width, kc, cout] = kshape[..] else {
            return Err(Error::dim(format!("conv1d kernel must be [W×Cin×Cout], got {kshape:?}")));
        };
        if kc != cin {
            return Err(Error::dim(format!(
                "conv1d kernel {kshape:?} does not match input channels {cin}"
            )));
        }
        let (left, t_out) = match padding {
            Padding::Same => ((width - 1) / 2, t),
            Padding::Valid => {
                if width > t {
                    return Err(Error::dim(format!(
                        "conv1d kernel width {width} exceeds input length {t}"
                    )));
                }
                (0, t - width + 1)
            }
        };
        let xs = self.value(x).data();
        let wc = width * cin;
        let mut cols = vec![0.0; t_out * wc];
        for o in 0..t_out {
            for w in 0..width {
                let src = o as isize + w as isize - left as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    cols[o * wc + w * cin..o * wc + (w + 1) * cin]
                        .copy_from_slice(&xs[s * cin..(s + 1) * cin]);
                }
            }
        }
        let mut out = vec![0.0; t_out * cout];
        gemm(
            t_out,
            wc,
            cout,
            &cols,
            Layout::row_major(wc),
            self.value(kernel).data(),
            Layout::row_major(cout),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![t_out, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, kernel, cols, left, width }, &[x, kernel]))
    }

    /// Per-channel maximum over all rows of `x: [T×C]`, giving `[C]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.mat_dims(x, "max_pool_time")?;
        let pooled = self.segment_max(x, &[(0, t)])?;
        self.reshape(pooled, vec![c])
    }

    /// Per-channel maximum over each `(start, len)` row segment, giving `[S×C]`.
    /// Gradient goes to the first row attaining the maximum.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (t, c) = self.mat_dims(x, "segment_max")?;
        if segments.is_empty() {
            return Err(Error::dim("segment_max: no segments"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > t {
                return Err(Error::dim(format!(
                    "segment ({start}, {len}) is empty or exceeds time axis of {t}"
                )));
            }
            for ch in 0..c {
                let mut best = start;
                for r in start + 1..start + len {
                    if xv.at(r, ch) > xv.at(best, ch) {
                        best = r;
                    }
                }
                argmax[s * c + ch] = best;
                out[s * c + ch] = xv.at(best, ch);
            }
        }
        let value = Tensor::new(vec![segments.len(), c], out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x]))
    }

    // ---- losses and reductions --------------------------------------------

    /// Mean softmax cross-entropy of `logits: [N×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.mat_dims(logits, "cross_entropy")?;
        if k < 2 {
            return Err(Error::validation(format!("cross_entropy needs at least 2 classes, got {k}")));
        }
        if labels.len() != n {
            return Err(Error::validation(format!("{} labels for {n} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- structural -------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("slice_cols {start}..{} of {c} columns", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols: nothing to concatenate"))?;
        let (r, _) = self.mat_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.mat_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim(format!("concat_cols: {pr} rows vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.last_dim();
                out.extend_from_slice(&pv.data()[i * pc..(i + 1) * pc]);
            }
        }
        let shape = if self.value(first).rank() == 1 { vec![total] } else { vec![r, total] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows: nothing to concatenate"))?;
        let (_, c) = self.mat_dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim(format!("concat_rows: {pc} columns vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Gathers rows of a matrix, giving `[rows.len() × C]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "select_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("select_rows: no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("select_rows: row {bad} of {r}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Embedding lookup from `table: [V×D]`; `None` ids yield zero rows with no gradient.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::dim("gather: no ids"));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= v {
                    return Err(Error::dim(format!("gather: id {id} outside table of {v} rows")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(tv.row(id));
            }
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of every node that requires them with respect to
    /// the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("gradient matches node shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, gy: &Tensor) {
        let gyd = gy.data();
        // Borrow the op out of the node while we write into other slots.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).matrix_dims().expect("checked in forward");
                let n = gy.last_dim();
                if self.wants(*a) {
                    // dA = dC · B'ᵀ where B' = b or bᵀ
                    let lb = if *trans_b { Layout::row_major(k) } else { Layout::transposed(n) };
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gyd, Layout::row_major(n), self.value(*b).data(), lb, 0.0, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    if *trans_b {
                        // b: [n×k], dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, gyd, Layout::transposed(n), ad, Layout::row_major(k), 0.0, &mut db);
                        self.accumulate(*b, &db);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ad, Layout::transposed(k), gyd, Layout::row_major(n), 0.0, &mut db);
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).matrix_dims().expect("checked in forward");
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gyd[j * r + i];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gyd);
                self.accumulate(*b, gyd);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gyd);
                let neg: Vec<f64> = gyd.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = gyd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = gyd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, gyd);
                if self.wants(*bias) {
                    let d = gy.last_dim();
                    let mut db = vec![0.0; d];
                    for row in gyd.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Affine { x, scale } => {
                let dx: Vec<f64> = gyd.iter().map(|g| g * scale).collect();
                self.accumulate(*x, &dx);
            }
            Op::RowScale { x, scales } => {
                let d = gy.last_dim();
                let mut dx = gyd.to_vec();
                for (row, s) in dx.chunks_mut(d).zip(scales) {
                    row.iter_mut().for_each(|e| *e *= s);
                }
                self.accumulate(*x, &dx);
            }
            Op::ElemScale { x, factors } => {
                let dx: Vec<f64> = gyd.iter().zip(factors).map(|(g, f)| g * f).collect();
                self.accumulate(*x, &dx);
            }
            Op::Act { x, act } => {
                let xs = self.value(*x).data();
                let ys = self.nodes[i].value.data();
                let dx: Vec<f64> = gyd
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&xv, &yv))| g * act.derivative(xv, yv))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let d = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(gyd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = gy.last_dim();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in gyd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(*gain, &dg);
                    self.accumulate(*bias, &db);
                }
                if self.wants(*x) {
                    let g = self.value(*gain).data();
                    let mut dx = vec![0.0; gyd.len()];
                    let df = d as f64;
                    for (r, ((dxr, gr), hr)) in
                        dx.chunks_mut(d).zip(gyd.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            dxr[j] = inv_std[r] / df * (df * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Conv1d { x, kernel, cols, left, width } => {
                let (t, cin) = self.value(*x).matrix_dims().expect("checked in forward");
                let t_out = gy.rows();
                let cout = gy.last_dim();
                let wc = width * cin;
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; wc * cout];
                    gemm(wc, t_out, cout, cols, Layout::transposed(wc), gyd, Layout::row_major(cout), 0.0, &mut dk);
                    self.accumulate(*kernel, &dk);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; t_out * wc];
                    gemm(
                        t_out,
                        cout,
                        wc,
                        gyd,
                        Layout::row_major(cout),
                        self.value(*kernel).data(),
                        Layout::transposed(cout),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; t * cin];
                    for o in 0..t_out {
                        for w in 0..*width {
                            let src = o as isize + w as isize - *left as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let from = &dcols[o * wc + w * cin..o * wc + (w + 1) * cin];
                                dx[s * cin..(s + 1) * cin].iter_mut().zip(from).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = gy.last_dim();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (idx, &row) in argmax.iter().enumerate() {
                    dx[row * c + idx % c] += gyd[idx];
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let n = labels.len() as f64;
                let scale = gyd[0] / n;
                let mut dx = probs.clone();
                for (row, &l) in dx.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|e| *e *= scale);
                }
                self.accumulate(*logits, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![gyd[0]; self.value(*x).len()];
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).matrix_dims().expect("checked in forward");
                let len = gy.last_dim();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gyd[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatCols(parts) => {
                let total = gy.last_dim();
                let r = gy.outer_len();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            dp.extend_from_slice(&gyd[i * total + offset..i * total + offset + pc]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, &gyd[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = gy.last_dim();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * c..(r + 1) * c].iter_mut().zip(&gyd[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*x, &dx);
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let d = gy.last_dim();
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (k, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            dt[id * d..(id + 1) * d]
                                .iter_mut()
                                .zip(&gyd[k * d..(k + 1) * d])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::Reshape(x) => self.accumulate(*x, gyd),
        }
        self.nodes[i].op = op;
    }
}

/// In-place softmax of one row with optional column mask.
pub(crate) fn softmax_row(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| kept(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if kept(j) { (*v - max).exp() } else { 0.0 };
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
