//! Reverse-mode autodiff over a dynamic tape.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a gradient-bearing
//! leaf. The tape is rebuilt for every forward pass.
//!
//! There is no broadcasting except scalar*tensor ([`Graph::scale`]) and the
//! explicit [`Graph::broadcast_rows`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize, len: usize },
    Softmax(Var),
    MaskedSoftmax { logits: Var, allow: Rc<Vec<bool>> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    BroadcastRows { row: Var, n: usize },
    GatherRows { table: Var, ids: Rc<Vec<usize>> },
    RowScaledResidual { base: Var, delta: Var, coeffs: Rc<Vec<f64>> },
}

struct Node {
    op: Op,
    out: Tensor,
    needs_grad: bool,
}

/// One forward pass: ops are appended in execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, out: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, out, needs_grad });
        Var(self.nodes.len() as u32 - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0 as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).out
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Insert a constant or trainable leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat_dims(a);
        let (kb, n) = self.mat_dims(b);
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        par::matmul_into(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, needs))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        self.same_shape(a, b, what)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((t, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), t, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n: usize = shape.iter().product();
        if n != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                src.shape(),
                shape
            )));
        }
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), t, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose wants 2-D, got {:?}",
                src.shape()
            )));
        }
        let (m, n) = (src.shape()[0], src.shape()[1]);
        let t = transpose_data(src.data(), m, n);
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![n, m], t)?, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        if axis > 1 {
            return Err(Error::ShapeMismatch(format!("concat axis {axis}")));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "concat wants 2-D parts, got {:?}",
                first
            )));
        }
        let fixed = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(Error::ShapeMismatch(format!(
                    "concat axis {axis}: {:?} vs {:?}",
                    s, first
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = vec![0.0; shape[0] * shape[1]];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).data();
                data[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        } else {
            let rows = shape[0];
            let mut col_at = 0;
            for &p in parts {
                let src = self.value(p);
                let w = src.shape()[1];
                for r in 0..rows {
                    data[r * total + col_at..r * total + col_at + w]
                        .copy_from_slice(src.row(r));
                }
                col_at += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat { parts: parts.to_vec(), axis },
            Tensor::new(shape, data)?,
            needs,
        ))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::ShapeMismatch(format!(
                "slice axis {axis} of {:?}",
                t.shape()
            )));
        }
        if start + len > t.shape()[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of axis {axis} size {}",
                start + len,
                t.shape()[axis]
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let (out_shape, data) = if axis == 0 {
            (vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&t.row(r)[start..start + len]);
            }
            (vec![rows, len], d)
        };
        let needs = self.needs(src);
        Ok(self.push(
            Op::Slice { src, axis, start, len },
            Tensor::new(out_shape, data)?,
            needs,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let w = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_row_in_place(row);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), t, needs))
    }

    /// Row-wise softmax restricted to `allow`-ed entries; disallowed entries
    /// get exactly zero weight. Errors if any row has no allowed entry.
    pub fn masked_softmax(&mut self, logits: Var, allow: Rc<Vec<bool>>) -> Result<Var> {
        let src = self.value(logits);
        if allow.len() != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for logits {:?}",
                allow.len(),
                src.shape()
            )));
        }
        let w = src.cols();
        let mut data = src.data().to_vec();
        for (r, row) in data.chunks_mut(w).enumerate() {
            let keep = &allow[r * w..(r + 1) * w];
            if !keep.iter().any(|&k| k) {
                return Err(Error::FullyMaskedRow(r));
            }
            let mut max = f64::NEG_INFINITY;
            for (v, &k) in row.iter().zip(keep) {
                if k && *v > max {
                    max = *v;
                }
            }
            let mut sum = 0.0;
            for (v, &k) in row.iter_mut().zip(keep) {
                if k {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            for (v, &k) in row.iter_mut().zip(keep) {
                if k {
                    *v /= sum;
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(logits);
        Ok(self.push(Op::MaskedSoftmax { logits, allow }, t, needs))
    }

    /// Normalize each row to zero mean and unit variance (no learned affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let w = src.cols();
        if w == 0 {
            return Err(Error::ShapeMismatch("layer_norm of empty rows".into()));
        }
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(src.rows());
        for row in data.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::LayerNorm { x, inv_std }, t, needs))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let needs = self.needs(a);
        self.push(Op::Gelu(a), t, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs(a);
        self.push(Op::Sum(a), t, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let t = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n as f64);
        let needs = self.needs(a);
        self.push(Op::Mean(a), t, needs)
    }

    /// Repeat a single row `n` times: `[d]` or `[1, d]` becomes `[n, d]`.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let src = self.value(row);
        if src.rows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast_rows wants one row, got {:?}",
                src.shape()
            )));
        }
        let d = src.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let needs = self.needs(row);
        Ok(self.push(Op::BroadcastRows { row, n }, Tensor::new(vec![n, d], data)?, needs))
    }

    /// Select rows of a `[r, d]` table by index, duplicates allowed.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let src = self.value(table);
        if src.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows wants a 2-D table, got {:?}",
                src.shape()
            )));
        }
        let (r, d) = (src.shape()[0], src.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            if i >= r {
                return Err(Error::ShapeMismatch(format!("gather_rows id {i} >= {r}")));
            }
            data.extend_from_slice(src.row(i));
        }
        let needs = self.needs(table);
        let shape = vec![ids.len(), d];
        Ok(self.push(Op::GatherRows { table, ids }, Tensor::new(shape, data)?, needs))
    }

    /// Per-row residual `out_i = base_i + coeffs_i * delta_i`. Rows whose
    /// coefficient is exactly zero are copied from `base` without arithmetic,
    /// so they stay bit-identical.
    pub fn row_scaled_residual(
        &mut self,
        base: Var,
        delta: Var,
        coeffs: Rc<Vec<f64>>,
    ) -> Result<Var> {
        self.same_shape(base, delta, "row_scaled_residual")?;
        let b = self.value(base);
        if coeffs.len() != b.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {} rows",
                coeffs.len(),
                b.rows()
            )));
        }
        let w = b.cols();
        let d = self.value(delta);
        let mut data = b.data().to_vec();
        for (i, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                let drow = d.row(i);
                for (v, &dv) in data[i * w..(i + 1) * w].iter_mut().zip(drow) {
                    *v += c * dv;
                }
            }
        }
        let t = Tensor::new(b.shape().to_vec(), data)?;
        let needs = self.needs(base) || self.needs(delta);
        Ok(self.push(Op::RowScaledResidual { base, delta, coeffs }, t, needs))
    }

    /// Gradient of `v` after [`Graph::backward`]; `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0 as usize).and_then(|g| g.as_deref())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut self.grads[v.0 as usize];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0 as usize] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = self.grads[idx].take().unwrap();
            self.step_backward(Var(idx as u32), &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn step_backward(&mut self, v: Var, gout: &[f64]) {
        // Shapes were validated in the forward pass.
        match &self.nodes[v.0 as usize].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.mat_dims(a);
                let n = self.mat_dims(b).1;
                if self.needs(a) {
                    let bt = transpose_data(self.value(b).data(), k, n);
                    let mut da = vec![0.0; m * k];
                    par::matmul_into(gout, &bt, m, n, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let at = transpose_data(self.value(a).data(), m, k);
                    let mut db = vec![0.0; k * n];
                    par::matmul_into(&at, gout, k, m, n, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, gout);
                self.add_grad(b, gout);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, gout);
                if self.needs(b) {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d: Vec<f64> =
                        gout.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let d: Vec<f64> =
                        gout.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.add_grad(b, &d);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    let d: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    self.add_grad(a, &d);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                self.add_grad(a, gout);
            }
            Op::Transpose(a) => {
                let a = *a;
                if self.needs(a) {
                    let (m, n) = self.mat_dims(a);
                    // gout has shape n x m; transpose back.
                    let d = transpose_data(gout, n, m);
                    self.add_grad(a, &d);
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                if axis == 0 {
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            self.add_grad(p, &gout[at..at + n]);
                        }
                        at += n;
                    }
                } else {
                    let rows = self.value(v).shape()[0];
                    let total = self.value(v).shape()[1];
                    let mut col_at = 0;
                    for p in parts {
                        let w = self.value(p).shape()[1];
                        if self.needs(p) {
                            let mut d = vec![0.0; rows * w];
                            for r in 0..rows {
                                d[r * w..(r + 1) * w].copy_from_slice(
                                    &gout[r * total + col_at..r * total + col_at + w],
                                );
                            }
                            self.add_grad(p, &d);
                        }
                        col_at += w;
                    }
                }
            }
            Op::Slice { src, axis, start, len } => {
                let (src, axis, start, len) = (*src, *axis, *start, *len);
                if self.needs(src) {
                    let (rows, cols) = self.mat_dims(src);
                    let mut d = vec![0.0; rows * cols];
                    if axis == 0 {
                        d[start * cols..(start + len) * cols].copy_from_slice(gout);
                    } else {
                        for r in 0..rows {
                            d[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&gout[r * len..(r + 1) * len]);
                        }
                    }
                    self.add_grad(src, &d);
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                if self.needs(a) {
                    let d = softmax_backward(self.value(v), gout, None);
                    self.add_grad(a, &d);
                }
            }
            Op::MaskedSoftmax { logits, allow } => {
                let logits = *logits;
                let allow = allow.clone();
                if self.needs(logits) {
                    let d = softmax_backward(self.value(v), gout, Some(&allow));
                    self.add_grad(logits, &d);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                if self.needs(x) {
                    let y = self.value(v);
                    let w = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gout[r * w..(r + 1) * w];
                        let gmean = gr.iter().sum::<f64>() / w as f64;
                        let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                        for j in 0..w {
                            d[r * w + j] = inv * (gr[j] - gmean - yr[j] * gy);
                        }
                    }
                    self.add_grad(x, &d);
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                if self.needs(a) {
                    let d: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&x, g)| g * gelu_grad_scalar(x))
                        .collect();
                    self.add_grad(a, &d);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.needs(a) {
                    let d = vec![gout[0]; self.value(a).len()];
                    self.add_grad(a, &d);
                }
            }
            Op::Mean(a) => {
                let a = *a;
                if self.needs(a) {
                    let n = self.value(a).len().max(1);
                    let d = vec![gout[0] / n as f64; self.value(a).len()];
                    self.add_grad(a, &d);
                }
            }
            Op::BroadcastRows { row, n } => {
                let (row, n) = (*row, *n);
                if self.needs(row) {
                    let d_len = self.value(row).len();
                    let mut d = vec![0.0; d_len];
                    for r in 0..n {
                        for j in 0..d_len {
                            d[j] += gout[r * d_len + j];
                        }
                    }
                    self.add_grad(row, &d);
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.needs(table) {
                    let (r, d_cols) = self.mat_dims(table);
                    let mut d = vec![0.0; r * d_cols];
                    for (pos, &i) in ids.iter().enumerate() {
                        for j in 0..d_cols {
                            d[i * d_cols + j] += gout[pos * d_cols + j];
                        }
                    }
                    self.add_grad(table, &d);
                }
            }
            Op::RowScaledResidual { base, delta, coeffs } => {
                let (base, delta) = (*base, *delta);
                let coeffs = coeffs.clone();
                self.add_grad(base, gout);
                if self.needs(delta) {
                    let w = self.value(delta).cols();
                    let mut d = vec![0.0; self.value(delta).len()];
                    for (i, &c) in coeffs.iter().enumerate() {
                        if c != 0.0 {
                            for j in 0..w {
                                d[i * w + j] = c * gout[i * w + j];
                            }
                        }
                    }
                    self.add_grad(delta, &d);
                }
            }
        }
    }
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_backward(probs: &Tensor, gout: &[f64], allow: Option<&[bool]>) -> Vec<f64> {
    let w = probs.cols();
    let mut d = vec![0.0; probs.len()];
    for r in 0..probs.rows() {
        let pr = probs.row(r);
        let gr = &gout[r * w..(r + 1) * w];
        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
        for j in 0..w {
            let allowed = allow.map_or(true, |a| a[r * w + j]);
            if allowed {
                d[r * w + j] = pr[j] * (gr[j] - dot);
            }
        }
    }
    d
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, returning the worst per-component error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// The unit floor in the denominator turns the measure into an absolute error
/// for components smaller than one, which keeps difference-quotient round-off
/// from dominating near-zero gradients. A function that ignores `x` yields
/// exactly zero.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    let lt = g.value(loss);
    if lt.len() != 1 {
        return Err(Error::NonScalarLoss(lt.shape().to_vec()));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(gr) => gr.to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(pt.clone(), false);
        let loss = f(&mut g, xv)?;
        Ok(g.value(loss).scalar_value())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Outcome of one gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.tol
    }
}

/// Finite-difference audit of every differentiable primitive. Each op runs
/// through a weighted scalar head so all its outputs influence the loss.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheck>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let h = 1e-6;
    let tol = 1e-6;
    let mut out = Vec::new();
    let mut check = |name: &str,
                     x: &Tensor,
                     f: &dyn Fn(&mut Graph, Var) -> Result<Var>|
     -> Result<()> {
        let rel_err = finite_diff_check(f, x, h)?;
        out.push(GradCheck { name: name.into(), rel_err, tol });
        Ok(())
    };

    let x34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w43 = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let b42 = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let w32 = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let row = Tensor::randn(&[1, 4], 1.0, &mut rng);

    // Weighted sum head: sum(y * w), with w a constant.
    fn head(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
        let wv = g.input(w.clone());
        let prod = g.mul(y, wv)?;
        Ok(g.sum(prod))
    }

    let c34 = x34.clone();
    check("add", &x34, &{
        let (w, c) = (w34.clone(), c34.clone());
        move |g: &mut Graph, v: Var| {
            let cv = g.input(c.clone());
            let y = g.add(v, cv)?;
            head(g, y, &w)
        }
    })?;
    check("sub", &x34, &{
        let (w, c) = (w34.clone(), c34.clone());
        move |g: &mut Graph, v: Var| {
            let cv = g.input(c.clone());
            let y = g.sub(cv, v)?;
            head(g, y, &w)
        }
    })?;
    check("mul", &x34, &{
        let (w, c) = (w34.clone(), c34.clone());
        move |g: &mut Graph, v: Var| {
            let cv = g.input(c.clone());
            let y = g.mul(v, cv)?;
            head(g, y, &w)
        }
    })?;
    check("scale", &x34, &{
        let w = w34.clone();
        move |g: &mut Graph, v: Var| {
            let y = g.scale(v, -1.75);
            head(g, y, &w)
        }
    })?;
    check("matmul_left", &x34, &{
        let (w, b) = (w32.clone(), b42.clone());
        move |g: &mut Graph, v: Var| {
            let bv = g.input(b.clone());
            let y = g.matmul(v, bv)?;
            head(g, y, &w)
        }
    })?;
    check("matmul_right", &b42, &{
        let (w, a) = (w32.clone(), x34.clone());
        move |g: &mut Graph, v: Var| {
            let av = g.input(a.clone());
            let y = g.matmul(av, v)?;
            head(g, y, &w)
        }
    })?;
    check("reshape", &x34, &{
        let w = Tensor::randn(&[2, 6], 1.0, &mut rng);
        move |g: &mut Graph, v: Var| {
            let y = g.reshape(v, &[2, 6])?;
            head(g, y, &w)
        }
    })?;
    check("transpose", &x34, &{
        let w = w43.clone();
        move |g: &mut Graph, v: Var| {
            let y = g.transpose(v)?;
            head(g, y, &w)
        }
    })?;
    check("concat_rows", &x34, &{
        let (w, c) = (Tensor::randn(&[6, 4], 1.0, &mut rng), c34.clone());
        move |g: &mut Graph, v: Var| {
            let cv = g.input(c.clone());
            let y = g.concat(&[v, cv], 0)?;
            head(g, y, &w)
        }
    })?;
    check("concat_cols", &x34, &{
        let (w, c) = (Tensor::randn(&[3, 8], 1.0, &mut rng), c34.clone());
        move |g: &mut Graph, v: Var| {
            let cv = g.input(c.clone());
            let y = g.concat(&[v, cv], 1)?;
            head(g, y, &w)
        }
    })?;
    check("slice", &x34, &{
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
        move |g: &mut Graph, v: Var| {
            let y = g.slice(v, 1, 1, 2)?;
            head(g, y, &w)
        }
    })?;
    check("softmax", &x34, &{
        let w = w34.clone();
        move |g: &mut Graph, v: Var| {
            let y = g.softmax(v)?;
            head(g, y, &w)
        }
    })?;
    check("masked_softmax", &x34, &{
        let w = w34.clone();
        let allow = Rc::new(vec![
            true, false, true, true, //
            true, true, false, false, //
            false, true, true, false,
        ]);
        move |g: &mut Graph, v: Var| {
            let y = g.masked_softmax(v, allow.clone())?;
            head(g, y, &w)
        }
    })?;
    check("layer_norm", &x34, &{
        let w = w34.clone();
        move |g: &mut Graph, v: Var| {
            let y = g.layer_norm(v)?;
            head(g, y, &w)
        }
    })?;
    check("gelu", &x34, &{
        let w = w34.clone();
        move |g: &mut Graph, v: Var| {
            let y = g.gelu(v);
            head(g, y, &w)
        }
    })?;
    check("sum", &x34, &|g: &mut Graph, v: Var| Ok(g.sum(v)))?;
    check("mean", &x34, &|g: &mut Graph, v: Var| Ok(g.mean(v)))?;
    check("broadcast_rows", &row, &{
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        move |g: &mut Graph, v: Var| {
            let y = g.broadcast_rows(v, 5)?;
            head(g, y, &w)
        }
    })?;
    check("gather_rows", &x34, &{
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ids = Rc::new(vec![0usize, 2, 1, 2, 0]);
        move |g: &mut Graph, v: Var| {
            let y = g.gather_rows(v, ids.clone())?;
            head(g, y, &w)
        }
    })?;
    let coeffs = Rc::new(vec![0.8, 0.0, 0.3]);
    check("row_scaled_residual_base", &x34, &{
        let (w, d, coeffs) = (w34.clone(), c34.clone(), coeffs.clone());
        move |g: &mut Graph, v: Var| {
            let dv = g.input(d.clone());
            let y = g.row_scaled_residual(v, dv, coeffs.clone())?;
            head(g, y, &w)
        }
    })?;
    check("row_scaled_residual_delta", &x34, &{
        let (w, b) = (w34.clone(), c34.clone());
        move |g: &mut Graph, v: Var| {
            let bv = g.input(b.clone());
            let y = g.row_scaled_residual(bv, v, coeffs.clone())?;
            head(g, y, &w)
        }
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_its_gradient_audit() {
        for c in primitive_checks(11).unwrap() {
            assert!(c.passed(), "{} rel err {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn sum_of_squares_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "error {err}");
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, _| {
                let c = g.input(Tensor::scalar(5.0));
                Ok(g.sum(c))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_errors_on_empty_rows() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::new(vec![2, 3], vec![5.0, 1.0, -2.0, 0.0, 0.0, 0.0]).unwrap());
        let allow = Rc::new(vec![true, false, true, true, true, true]);
        let p = g.masked_softmax(logits, allow).unwrap();
        let out = g.value(p);
        assert_eq!(out.data()[1], 0.0);
        let row0 = out.row(0);
        assert!((row0.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut g2 = Graph::new();
        let logits = g2.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let err = g2.masked_softmax(logits, Rc::new(vec![false, false]));
        assert!(matches!(err, Err(Error::FullyMaskedRow(0))));
    }

    #[test]
    fn row_scaled_residual_copies_zero_coefficient_rows_bitwise() {
        let mut g = Graph::new();
        let base = g.input(Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let delta = g.input(Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap());
        let out = g
            .row_scaled_residual(base, delta, Rc::new(vec![0.0, 0.5]))
            .unwrap();
        let b = g.value(base).clone();
        let o = g.value(out);
        assert_eq!(o.row(0)[0].to_bits(), b.row(0)[0].to_bits());
        assert_eq!(o.row(0)[1].to_bits(), b.row(0)[1].to_bits());
        assert_eq!(o.row(1)[0], 0.3 + 0.5 * 9.0);
    }
}
