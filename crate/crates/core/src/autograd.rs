//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! bound lazily from a [`ParamStore`]: the first [`Tape::param`] call for an
//! id copies the tensor onto the tape, later calls reuse that node. Calling
//! [`Tape::backward`] on a `1 x 1` node returns a [`Grads`] holding the
//! gradient of every node, from which per-parameter gradients are gathered
//! in store order.

use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    OuterAdd(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Nll(Var, Vec<usize>, Vec<f64>),
    BceLogits(Var, Rc<Mat>),
    LayerNorm(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    /// A tape without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(ma.cols(), r.cols(), "add_row column mismatch");
        let mut value = ma.clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        assert_eq!(ma.cols(), r.cols(), "mul_row column mismatch");
        let mut value = ma.clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x *= y;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    /// `out[i][j] = col[i] + row[j]` for an `n x 1` column and `1 x m` row.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Var {
        let (c, r) = (self.value(col), self.value(row));
        assert_eq!(c.cols(), 1, "outer_add expects a column");
        assert_eq!(r.rows(), 1, "outer_add expects a row");
        let mut value = Mat::zeros(c.rows(), r.cols());
        for i in 0..c.rows() {
            let ci = c.get(i, 0);
            for (o, rj) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o = ci + rj;
            }
        }
        self.push(value, Op::OuterAdd(col, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(value, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(value, Op::Sqrt(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise softmax restricted to entries where `mask` is non-zero.
    /// Masked entries come out as exactly zero; a fully masked row is all
    /// zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape(), "mask shape mismatch");
        let big = x.zip_map(mask, |v, m| if m != 0.0 { v } else { f64::NEG_INFINITY });
        let value = softmax_rows(&big);
        // The softmax backward only reads the output, and masked outputs are
        // zero, so the plain softmax rule routes nothing to masked entries.
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hstack(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::vstack(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let idx: Vec<usize> = (start..start + len).collect();
        let value = x.select_rows(&idx);
        self.push(value, Op::SliceRows(a, start))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    /// Column-wise maximum over rows as a `1 x c` row; ties go to the
    /// smaller row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows() > 0, "max_rows over zero rows");
        let mut arg = vec![0usize; x.cols()];
        let mut best = x.row(0).to_vec();
        for r in 1..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                if *v > best[c] {
                    best[c] = *v;
                    arg[c] = r;
                }
            }
        }
        self.push(Mat::row_vector(best), Op::MaxRows(a, arg))
    }

    /// `-sum_i w_i * a[i, targets[i]]` for a matrix of log-probabilities.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logp);
        assert_eq!(x.rows(), targets.len(), "nll target count mismatch");
        assert_eq!(targets.len(), weights.len(), "nll weight count mismatch");
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                total -= w * x.get(i, t);
            }
        }
        self.push(
            Mat::scalar(total),
            Op::Nll(logp, targets.to_vec(), weights.to_vec()),
        )
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Mat>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape mismatch");
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Mat::scalar(total), Op::BceLogits(logits, targets))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without an
    /// affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let n = x.cols() as f64;
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm(a, inv_std))
    }

    // ---- composites ------------------------------------------------------

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean distance between two same-shape tensors.
    pub fn euclidean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// A fingerprint of every non-smooth branch taken on this tape (ReLU
    /// signs, max-pool winners, zero square roots). Two evaluations with the
    /// same fingerprint lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    for v in self.value(*a).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxRows(_, arg) => arg.hash(&mut h),
                Op::Sqrt(_) => {
                    for v in node.value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = gemm(&g, false, self.value(*b), true);
                    let db = gemm(self.value(*a), true, &g, false);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    let dr = g.mean_rows().map(|v| v * g.rows() as f64);
                    accumulate(&mut grads, *r, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r);
                    let av = self.value(*a);
                    let mut da = g.clone();
                    let mut dr = vec![0.0; rv.cols()];
                    for row in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gv = g.get(row, c);
                            da.set(row, c, gv * rv.get(0, c));
                            dr[c] += gv * av.get(row, c);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *r, Mat::row_vector(dr));
                }
                Op::OuterAdd(col, row) => {
                    let dc: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    let dr = g.mean_rows().map(|v| v * g.rows() as f64);
                    accumulate(&mut grads, *col, Mat::from_vec(dc.len(), 1, dc));
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y)))
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, d)
                }
                Op::LeakyRelu(a, s) => {
                    let d = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * s });
                    accumulate(&mut grads, *a, d)
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut d = g.zip_map(y, |g, y| g * (y + 1.0));
                    for (dv, (&xv, &gv)) in d.data_mut().iter_mut().zip(x.data().iter().zip(g.data())) {
                        if xv > 0.0 {
                            *dv = gv;
                        }
                    }
                    accumulate(&mut grads, *a, d)
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y)),
                Op::Log(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |g, x| g / x))
                }
                Op::Sqrt(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
                ),
                Op::Softmax(a) => {
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, d)
                }
                Op::LogSoftmax(a) => {
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            d.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                        }
                    }
                    accumulate(&mut grads, *a, d)
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let idx: Vec<usize> = (off..off + h).collect();
                        off += h;
                        accumulate(&mut grads, *p, g.select_rows(&idx));
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Mat::filled(rows, cols, g.item()));
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            d.set(r, c, g.get(0, c) * inv);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MaxRows(a, arg) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        d.set(r, c, g.get(0, c));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Nll(a, targets, weights) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    let gv = g.item();
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        d.set(i, t, -w * gv);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::BceLogits(a, targets) => {
                    let gv = g.item();
                    let d = self
                        .value(*a)
                        .zip_map(targets, |z, t| gv * (sigmoid(z) - t));
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm(a, inv_std) => {
                    let n = y.cols() as f64;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.cols() {
                            d.set(r, c, inv_std[r] * (gr[c] - mg - yr[c] * mgy));
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }

        Grads {
            grads,
            bound: self.bound.clone(),
            shapes: self
                .store
                .map(|s| s.iter().map(|(_, _, m)| m.shape()).collect())
                .unwrap_or_default(),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
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

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Gradients of one backward pass.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    bound: Vec<Option<Var>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient with respect to any node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn params(&self) -> Vec<Mat> {
        self.bound
            .iter()
            .zip(&self.shapes)
            .map(|(b, &(r, c))| {
                b.and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Mat::zeros(r, c))
            })
            .collect()
    }
}
