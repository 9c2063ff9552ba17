//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! Operands always precede their results, so [`Tape::backward`] is a single
//! reverse sweep over the node list. Leaf gradients accumulate across
//! `backward` calls until [`Tape::zero_grad`].
//!
//! Shapes follow a matrix convention: the last axis is "columns", everything
//! before it is flattened into rows.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    BceWithLogits {
        logit: Var,
        target: f64,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable (or otherwise differentiated) input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.ndim() != 2 {
            return Err(Error::dim(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    /// Row-wise `softmax(scale * x)`, stabilised by the row maximum.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("softmax scale must be > 0, got {scale}")));
        }
        let t = self.value(x);
        let n = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (scale * (v - max)).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, scale }, rg))
    }

    /// Normalises over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(beta)));
        }
        let t = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over axis 0 of a matrix, keeping a leading axis of size 1.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mean_rows")?;
        if m == 0 {
            return Err(Error::Contract("mean over an empty axis".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(x), rg))
    }

    /// Mean over axis 1 of a matrix, producing an `m x 1` column.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mean_cols")?;
        if n == 0 {
            return Err(Error::Contract("mean over an empty axis".into()));
        }
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::MeanCols(x), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for width {n}"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.value(x).data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), rg))
    }

    /// Weighted binary cross-entropy on a single logit, in the
    /// `max(z, 0) - z*y + ln(1 + e^{-|z|})` form.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64, weight: f64) -> Result<Var> {
        let z = self.value(logit).item()?;
        let loss = weight * (z.max(0.0) - z * target + (-z.abs()).exp().ln_1p());
        let rg = self.rg(logit);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logit,
                target,
                weight,
            },
            rg,
        ))
    }

    /// Populates leaf gradients with d(loss)/d(leaf), adding to whatever the
    /// leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), g).expect("shape preserved"),
                        )
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let da = self.slot(adj, *a);
                    gemm_nt_acc(g, bv.data(), da, m, n, k);
                }
                if self.rg(*b) {
                    let db = self.slot(adj, *b);
                    gemm_tn_acc(av.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        axpy(self.slot(adj, v), g, 1.0);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    axpy(self.slot(adj, *a), g, 1.0);
                }
                if self.rg(*row) {
                    let n = self.value(*row).numel();
                    let dr = self.slot(adj, *row);
                    for chunk in g.chunks(n) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let da = self.slot(adj, *a);
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let db = self.slot(adj, *b);
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => axpy(self.slot(adj, *a), g, *c),
            Op::AddScalar(a) => axpy(self.slot(adj, *a), g, 1.0),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = self.slot(adj, *a);
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da = self.slot(adj, *a);
                for ((d, gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                }
            }
            Op::Sigmoid(a) => {
                let da = self.slot(adj, *a);
                for ((d, gv), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Softmax { x, scale } => {
                let n = node.value.cols();
                let dx = self.slot(adj, *x);
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += scale * y * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                if self.rg(*gamma) {
                    let dg = self.slot(adj, *gamma);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = self.slot(adj, *beta);
                    for grow in g.chunks(d) {
                        axpy(db, grow, 1.0);
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = self.slot(adj, *x);
                    let mut dh = vec![0.0; d];
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for ((o, gv), gm) in dh.iter_mut().zip(grow).zip(gam) {
                            *o = gv * gm;
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dhv), h) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *o += inv_std[r] * (dhv - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).shape()[0];
                let dx = self.slot(adj, *x);
                for drow in dx.chunks_mut(g.len()) {
                    axpy(drow, g, 1.0 / m as f64);
                }
            }
            Op::MeanCols(x) => {
                let n = self.value(*x).shape()[1];
                let dx = self.slot(adj, *x);
                for (drow, gv) in dx.chunks_mut(n).zip(g) {
                    for d in drow {
                        *d += gv / n as f64;
                    }
                }
            }
            Op::Sum(x) => {
                let dx = self.slot(adj, *x);
                for d in dx {
                    *d += g[0];
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let dp = self.slot(adj, p);
                        for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(drow, &grow[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                let dx = self.slot(adj, *x);
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(w)) {
                    axpy(&mut drow[*start..*start + w], grow, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let dx = self.slot(adj, *x);
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::BceWithLogits {
                logit,
                target,
                weight,
            } => {
                let z = self.value(*logit).data()[0];
                let dz = self.slot(adj, *logit);
                dz[0] += g[0] * weight * (stable_sigmoid(z) - target);
            }
        }
    }

    /// Adjoint buffer for `v`, allocated on first use.
    #[allow(clippy::mut_from_ref)]
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let n = self.value(v).numel();
        adj[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
