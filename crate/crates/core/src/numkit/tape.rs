//! Minimal reverse-mode tape over [`Mat`] values.
//!
//! Every method on [`Tape`] evaluates eagerly and records the operation; the
//! returned [`Var`] is an index into the tape. [`Tape::vjp`] walks the record
//! backwards from one output and returns the vector-Jacobian product for every
//! node that depends on a parameter. The forward values are never touched by
//! the reverse pass.
//!
//! Boolean masks (RAF fire indicators, ReLU gates) are treated as constants,
//! so their gradient is zero.

use super::mat::Mat;
use super::ops;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    AddScalar(Var),
    Relu(Var),
    Phi(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Clamp(Var, f64),
    FrobNorm(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    LayerNorm(Var, f64),
    Mask(Var, Mat),
    CrossEntropy(Var, Vec<Option<usize>>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse pass: one optional gradient per tape node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled with `like`'s shape if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_tn(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulTn(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Hadamard(a, b), ng))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = broadcast_row(self.value(a), self.value(row), "add_row", |x, r| x + r)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = broadcast_row(self.value(a), self.value(row), "mul_row", |x, r| x * r)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, k), ng)
    }

    /// `a · s` for a `1×1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar(s, "scale_by")?;
        let v = self.value(a).scale(k);
        let ng = self.ng(&[a, s]);
        Ok(self.push(v, Op::ScaleBy(a, s), ng))
    }

    /// `a / s` for a `1×1` variable `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar(s, "div_by")?;
        if k == 0.0 {
            return Err(Error::domain("div_by", "division by zero"));
        }
        let v = self.value(a).map(|x| x / k);
        v.ensure_finite("div_by")?;
        let ng = self.ng(&[a, s]);
        Ok(self.push(v, Op::DivBy(a, s), ng))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn phi(&mut self, a: Var) -> Var {
        let v = ops::phi_map(self.value(a));
        let ng = self.ng(&[a]);
        self.push(v, Op::Phi(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn clamp(&mut self, a: Var, bound: f64) -> Result<Var> {
        let v = ops::clamp_mat(self.value(a), bound)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Clamp(a, bound), ng))
    }

    pub fn frob_norm(&mut self, a: Var) -> Var {
        let v = Mat::scalar(ops::frob_norm(self.value(a)));
        let ng = self.ng(&[a]);
        self.push(v, Op::FrobNorm(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    /// Rows of `table` selected by `idx`, in order (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut rows = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    limit: t.rows(),
                });
            }
            rows.extend_from_slice(t.row_slice(i));
        }
        let v = Mat::new(idx.len(), t.cols(), rows)?;
        let ng = self.ng(&[table]);
        Ok(self.push(v, Op::Gather(table, idx.to_vec()), ng))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_rows(self.value(a), eps);
        let ng = self.ng(&[a]);
        self.push(v, Op::LayerNorm(a, eps), ng)
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, a: Var, mask: Mat) -> Result<Var> {
        let v = self.value(a).hadamard(&mask)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Mask(a, mask), ng))
    }

    /// Mean token cross-entropy of row-wise logits; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.rows() {
            return Err(Error::shape("cross_entropy", z.shape(), (targets.len(), 1)));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= z.cols() {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    limit: z.cols(),
                });
            }
            let row = z.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Param(
                "cross_entropy with no target positions".into(),
            ));
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::domain("cross_entropy", "non-finite loss"));
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Mat::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec()),
            ng,
        ))
    }

    fn expect_scalar(&self, s: Var, op: &'static str) -> Result<f64> {
        let m = self.value(s);
        if m.shape() != (1, 1) {
            return Err(Error::shape(op, m.shape(), (1, 1)));
        }
        Ok(m.data()[0])
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the
    /// output). Returns `∂(seed · output)/∂node` for every node that depends
    /// on a parameter.
    pub fn vjp(&self, output: Var, seed: &Mat) -> Result<Grads> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("vjp", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        // Slice gradients are added straight into the rows/columns they came
        // from instead of materializing a zero-padded copy.
        if let Op::SliceRows(a, start) | Op::SliceCols(a, start) = &node.op {
            if !need(*a) {
                return Ok(());
            }
            let src = self.value(*a);
            let slot = grads[a.0].get_or_insert_with(|| Mat::zeros(src.rows(), src.cols()));
            let c = src.cols();
            let by_rows = matches!(node.op, Op::SliceRows(..));
            for r in 0..g.rows() {
                let (row, col) = if by_rows { (start + r, 0) } else { (r, *start) };
                let dst = &mut slot.data_mut()[row * c + col..row * c + col + g.cols()];
                for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                    *x += y;
                }
            }
            return Ok(());
        }
        let mut acc = |v: Var, d: Mat| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, ops::matmul_nt(g, self.value(*b))?)?;
                }
                if need(*b) {
                    acc(*b, ops::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if need(*a) {
                    acc(*a, ops::matmul(g, self.value(*b))?)?;
                }
                if need(*b) {
                    acc(*b, ops::matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::MatMulTn(a, b) => {
                if need(*a) {
                    acc(*a, ops::matmul_nt(self.value(*b), g)?)?;
                }
                if need(*b) {
                    acc(*b, ops::matmul(self.value(*a), g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, column_sums(g))?;
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                acc(*a, broadcast_row(g, r, "mul_row", |x, y| x * y)?)?;
                acc(*row, column_sums(&g.hadamard(self.value(*a))?))?;
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::ScaleBy(a, s) => {
                let k = self.scalar_value(*s);
                acc(*a, g.scale(k))?;
                acc(*s, Mat::scalar(g.hadamard(self.value(*a))?.sum()))?;
            }
            Op::DivBy(a, s) => {
                let k = self.scalar_value(*s);
                acc(*a, g.map(|x| x / k))?;
                let dot = g.hadamard(self.value(*a))?.sum();
                acc(*s, Mat::scalar(-dot / (k * k)))?;
            }
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Relu(a) => {
                let d = g.zip_map(
                    self.value(*a),
                    "relu_bwd",
                    |gi, x| if x > 0.0 { gi } else { 0.0 },
                )?;
                acc(*a, d)?;
            }
            Op::Phi(a) => {
                let d = g.zip_map(self.value(*a), "phi_bwd", |gi, x| {
                    if x >= 0.0 {
                        gi
                    } else {
                        gi * x.exp()
                    }
                })?;
                acc(*a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = g.hadamard(y)?;
                for r in 0..y.rows() {
                    let dot: f64 = d.row_slice(r).iter().sum();
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let dr = &mut d.data_mut()[r * cols..(r + 1) * cols];
                    for (di, yi) in dr.iter_mut().zip(yr) {
                        *di -= yi * dot;
                    }
                }
                acc(*a, d)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::SliceRows(..) | Op::SliceCols(..) => unreachable!("handled above"),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    acc(*p, g.slice_rows(offset, offset + n)?)?;
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    acc(*p, g.slice_cols(offset, offset + n)?)?;
                    offset += n;
                }
            }
            Op::Clamp(a, bound) => {
                let b = *bound;
                let d = g.zip_map(self.value(*a), "clamp_bwd", |gi, x| {
                    if x > -b && x < b {
                        gi
                    } else {
                        0.0
                    }
                })?;
                acc(*a, d)?;
            }
            Op::FrobNorm(a) => {
                let n = node.value.data()[0];
                let gs = g.data()[0];
                let src = self.value(*a);
                let d = if n > 0.0 {
                    src.scale(gs / n)
                } else {
                    Mat::zeros(src.rows(), src.cols())
                };
                acc(*a, d)?;
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                acc(*a, Mat::filled(src.rows(), src.cols(), g.data()[0]))?;
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let mut d = Mat::zeros(t.rows(), t.cols());
                let c = t.cols();
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                        *x += y;
                    }
                }
                acc(*table, d)?;
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let xhat = &node.value;
                let c = x.cols();
                let mut d = Mat::zeros(x.rows(), c);
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row_slice(r);
                    let hr = xhat.row_slice(r);
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let ghmean = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d.set(r, j, inv * (gr[j] - gmean - hr[j] * ghmean));
                    }
                }
                acc(*a, d)?;
            }
            Op::Mask(a, m) => acc(*a, g.hadamard(m)?)?,
            Op::CrossEntropy(logits, targets) => {
                let z = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let gs = g.data()[0] / count;
                let mut d = Mat::zeros(z.rows(), z.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let mut row = z.row_slice(r).to_vec();
                    ops::softmax_in_place(&mut row);
                    row[t] -= 1.0;
                    for (j, p) in row.into_iter().enumerate() {
                        d.set(r, j, p * gs);
                    }
                }
                acc(*logits, d)?;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tape::vjp`].
pub fn vjp(tape: &Tape, output: Var, seed: &Mat) -> Result<Grads> {
    tape.vjp(output, seed)
}

pub(crate) fn layer_norm_rows(x: &Mat, eps: f64) -> Mat {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub(crate) fn broadcast_row(
    a: &Mat,
    row: &Mat,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Mat> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::shape(op, a.shape(), row.shape()));
    }
    let mut out = a.clone();
    let c = a.cols();
    for chunk in out.data_mut().chunks_mut(c.max(1)) {
        for (x, &r) in chunk.iter_mut().zip(row.data()) {
            *x = f(*x, r);
        }
    }
    Ok(out)
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    out
}
