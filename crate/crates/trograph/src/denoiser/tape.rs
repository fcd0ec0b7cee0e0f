//! A small define-by-run reverse-mode autodiff engine over dense matrices.
//!
//! Every operation the denoiser needs is a tape node with a hand-written
//! backward rule; values are computed eagerly on construction and gradients
//! flow in one reverse sweep. Only `f64` matrices, no broadcasting beyond
//! the few explicit ops, no graph reuse across calls.

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = &self.data[r * self.cols..(r + 1) * self.cols];
            let b_row = &other.data[r * other.cols..(r + 1) * other.cols];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t column mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a_row = &self.data[r * self.cols..(r + 1) * self.cols];
            for j in 0..other.rows {
                let b_row = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[r * other.rows + j] = acc;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { grad: bool },
    MatMul(usize, usize),
    Add(usize, usize),
    #[allow(dead_code)] // kept for tape completeness; only tests use it today
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    AddBiasRow(usize, usize),
    ConcatCols(Vec<usize>),
    RepeatRows(usize, usize),
    TileRows(usize, usize),
    RowSums(usize),
    SumRowBlocks(usize, usize),
    ScaleRows(usize, usize),
    SoftmaxBlocks { x: usize, block: usize, active: Vec<bool> },
    Silu(usize),
    LayerNormRows { x: usize, eps: f64 },
    ZeroRows { x: usize, keep: Vec<bool> },
    SqLoss { pred: usize, target: usize, col_weights: Vec<f64>, keep: Vec<bool> },
}

struct Node {
    op: Op,
    value: Mat,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(super) usize);

/// The recording tape. Build the computation through its methods, then call
/// [`Tape::backward`] on a scalar node.
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf { grad: false }, value)
    }

    /// A parameter input; its gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf { grad: true }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Add(a.0, b.0), value)
    }

    #[allow(dead_code)] // kept for tape completeness; only tests use it today
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Sub(a.0, b.0), value)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul_elem shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::MulElem(a.0, b.0), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x * c).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Scale(a.0, c), value)
    }

    /// Adds a `1 x C` row to every row of an `R x C` matrix.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.rows, 1, "bias must be a single row");
        assert_eq!(vx.cols, vb.cols, "bias width mismatch");
        let mut value = vx.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(r, c) += vb.data[c];
            }
        }
        self.push(Op::AddBiasRow(x.0, bias.0), value)
    }

    /// Column-wise concatenation of same-height matrices.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut value = Mat::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.data[r * total + offset..r * total + offset + vp.cols]
                    .copy_from_slice(vp.row(r));
            }
            offset += vp.cols;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), value)
    }

    /// Each row repeated `times` consecutive times: `R x C -> (R*times) x C`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut value = Mat::zeros(vx.rows * times, vx.cols);
        for r in 0..vx.rows {
            for s in 0..times {
                let dst = (r * times + s) * vx.cols;
                value.data[dst..dst + vx.cols].copy_from_slice(vx.row(r));
            }
        }
        self.push(Op::RepeatRows(x.0, times), value)
    }

    /// The whole block repeated `times` times: `R x C -> (times*R) x C`.
    pub fn tile_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut value = Mat::zeros(vx.rows * times, vx.cols);
        for b in 0..times {
            for r in 0..vx.rows {
                let dst = (b * vx.rows + r) * vx.cols;
                value.data[dst..dst + vx.cols].copy_from_slice(vx.row(r));
            }
        }
        self.push(Op::TileRows(x.0, times), value)
    }

    /// Per-row sum over columns: `R x C -> R x 1`.
    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut value = Mat::zeros(vx.rows, 1);
        for r in 0..vx.rows {
            value.data[r] = vx.row(r).iter().sum();
        }
        self.push(Op::RowSums(x.0), value)
    }

    /// Sums consecutive row blocks: `(B*block) x C -> B x C`.
    pub fn sum_row_blocks(&mut self, x: NodeId, block: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.rows % block, 0, "row count not divisible by block");
        let b = vx.rows / block;
        let mut value = Mat::zeros(b, vx.cols);
        for r in 0..vx.rows {
            let dst = (r / block) * vx.cols;
            for c in 0..vx.cols {
                value.data[dst + c] += vx.at(r, c);
            }
        }
        self.push(Op::SumRowBlocks(x.0, block), value)
    }

    /// Scales row `r` of `x` by `s[r]`, `s` being `R x 1`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(vs.cols, 1, "row scales must be a column");
        assert_eq!(vx.rows, vs.rows, "row scale count mismatch");
        let mut value = vx.clone();
        for r in 0..value.rows {
            let f = vs.data[r];
            for c in 0..value.cols {
                *value.at_mut(r, c) *= f;
            }
        }
        self.push(Op::ScaleRows(x.0, s.0), value)
    }

    /// Softmax over consecutive blocks of a column vector, restricted to
    /// `active` entries; inactive entries come out exactly zero.
    pub fn softmax_blocks(&mut self, x: NodeId, block: usize, active: &[bool]) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.cols, 1, "softmax input must be a column");
        assert_eq!(vx.rows % block, 0, "softmax row count not divisible by block");
        assert_eq!(active.len(), vx.rows, "active mask length mismatch");
        let mut value = Mat::zeros(vx.rows, 1);
        for b in 0..vx.rows / block {
            let range = b * block..(b + 1) * block;
            let mut max = f64::NEG_INFINITY;
            for r in range.clone() {
                if active[r] && vx.data[r] > max {
                    max = vx.data[r];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for r in range.clone() {
                if active[r] {
                    let e = (vx.data[r] - max).exp();
                    value.data[r] = e;
                    denom += e;
                }
            }
            for r in range {
                if active[r] {
                    value.data[r] /= denom;
                }
            }
        }
        self.push(Op::SoftmaxBlocks { x: x.0, block, active: active.to_vec() }, value)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&v| v * sigmoid(v)).collect();
        let value = Mat::from_vec(vx.rows, vx.cols, data);
        self.push(Op::Silu(x.0), value)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut value = vx.clone();
        let n = vx.cols as f64;
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..vx.cols {
                *value.at_mut(r, c) = (row[c] - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows { x: x.0, eps }, value)
    }

    /// Zeroes the rows where `keep` is false.
    pub fn zero_rows(&mut self, x: NodeId, keep: &[bool]) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(keep.len(), vx.rows, "keep mask length mismatch");
        let mut value = vx.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                for c in 0..value.cols {
                    *value.at_mut(r, c) = 0.0;
                }
            }
        }
        self.push(Op::ZeroRows { x: x.0, keep: keep.to_vec() }, value)
    }

    /// Scalar `sum_r,c col_weights[c] * (pred - target)^2` over kept rows.
    pub fn sq_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        col_weights: &[f64],
        keep: &[bool],
    ) -> NodeId {
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        assert_eq!((vp.rows, vp.cols), (vt.rows, vt.cols), "loss shape mismatch");
        assert_eq!(col_weights.len(), vp.cols, "column weight count mismatch");
        assert_eq!(keep.len(), vp.rows, "keep mask length mismatch");
        let mut acc = 0.0;
        for r in 0..vp.rows {
            if !keep[r] {
                continue;
            }
            for c in 0..vp.cols {
                let d = vp.at(r, c) - vt.at(r, c);
                acc += col_weights[c] * d * d;
            }
        }
        let value = Mat::from_vec(1, 1, vec![acc]);
        self.push(
            Op::SqLoss {
                pred: pred.0,
                target: target.0,
                col_weights: col_weights.to_vec(),
                keep: keep.to_vec(),
            },
            value,
        )
    }

    /// Reverse sweep from a scalar node. Returns, per tape node, the
    /// gradient for `param` leaves and `None` elsewhere.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Mat>>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.rows != 1 || root_val.cols != 1 {
            return Err(Error::invalid("backward root must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { grad } => {
                    if *grad {
                        grads[i] = Some(g);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    for x in &mut neg.data {
                        *x = -*x;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::MulElem(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                    );
                    let db = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let da =
                        Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * c).collect());
                    accumulate(&mut grads, *a, da);
                }
                Op::AddBiasRow(x, bias) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.cols;
                        let mut dp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.data[r * w..(r + 1) * w]
                                .copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, *p, dp);
                        offset += w;
                    }
                }
                Op::RepeatRows(x, times) => {
                    let vx = &self.nodes[*x].value;
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..g.rows {
                        let src = r / times;
                        for c in 0..g.cols {
                            *dx.at_mut(src, c) += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::TileRows(x, times) => {
                    let vx = &self.nodes[*x].value;
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for b in 0..*times {
                        for r in 0..vx.rows {
                            for c in 0..g.cols {
                                *dx.at_mut(r, c) += g.at(b * vx.rows + r, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowSums(x) => {
                    let vx = &self.nodes[*x].value;
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        for c in 0..vx.cols {
                            *dx.at_mut(r, c) = g.data[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumRowBlocks(x, block) => {
                    let vx = &self.nodes[*x].value;
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        let src = r / block;
                        for c in 0..vx.cols {
                            *dx.at_mut(r, c) = g.at(src, c);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ScaleRows(x, s) => {
                    let (vx, vs) = (&self.nodes[*x].value, &self.nodes[*s].value);
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    let mut ds = Mat::zeros(vs.rows, 1);
                    for r in 0..vx.rows {
                        let f = vs.data[r];
                        let mut acc = 0.0;
                        for c in 0..vx.cols {
                            *dx.at_mut(r, c) = g.at(r, c) * f;
                            acc += g.at(r, c) * vx.at(r, c);
                        }
                        ds.data[r] = acc;
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::SoftmaxBlocks { x, block, active } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Mat::zeros(y.rows, 1);
                    for b in 0..y.rows / block {
                        let range = b * block..(b + 1) * block;
                        let mut dot = 0.0;
                        for r in range.clone() {
                            if active[r] {
                                dot += y.data[r] * g.data[r];
                            }
                        }
                        for r in range {
                            if active[r] {
                                dx.data[r] = y.data[r] * (g.data[r] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let vx = &self.nodes[*x].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(&gd, &v)| {
                            let s = sigmoid(v);
                            gd * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNormRows { x, eps } => {
                    let vx = &self.nodes[*x].value;
                    let y = &self.nodes[i].value;
                    let n = vx.cols as f64;
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        let row = vx.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_row = g.row(r);
                        let y_row = y.row(r);
                        let g_mean = g_row.iter().sum::<f64>() / n;
                        let gy_mean =
                            g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum::<f64>() / n;
                        for c in 0..vx.cols {
                            *dx.at_mut(r, c) = inv * (g_row[c] - g_mean - y_row[c] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ZeroRows { x, keep } => {
                    let mut dx = g.clone();
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            for c in 0..dx.cols {
                                *dx.at_mut(r, c) = 0.0;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SqLoss { pred, target, col_weights, keep } => {
                    let (vp, vt) = (&self.nodes[*pred].value, &self.nodes[*target].value);
                    let seed = g.data[0];
                    let mut dp = Mat::zeros(vp.rows, vp.cols);
                    for r in 0..vp.rows {
                        if !keep[r] {
                            continue;
                        }
                        for c in 0..vp.cols {
                            *dp.at_mut(r, c) =
                                seed * 2.0 * col_weights[c] * (vp.at(r, c) - vt.at(r, c));
                        }
                    }
                    let mut dt = dp.clone();
                    for v in &mut dt.data {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *pred, dp);
                    accumulate(&mut grads, *target, dt);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Mat>], target: usize, update: Mat) {
    match &mut grads[target] {
        Some(existing) => {
            debug_assert_eq!(
                (existing.rows, existing.cols),
                (update.rows, update.cols),
                "gradient shape mismatch"
            );
            for (e, u) in existing.data.iter_mut().zip(&update.data) {
                *e += u;
            }
        }
        slot @ None => *slot = Some(update),
    }
}
