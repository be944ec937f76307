//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so walking the list backwards is a
//! reverse topological order: every node is visited exactly once and parent
//! gradients accumulate additively.

use std::collections::HashMap;

use super::{dot, matmul_at_into, matmul_bt_into, matmul_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    MulConst(Var, Tensor),
    Silu(Var),
    Sigmoid(Var),
    Ln(Var),
    TimeEncode {
        freqs: Var,
        dts: Vec<f64>,
        active: Vec<bool>,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        rot_width: usize,
        base: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SegScores {
        q: Var,
        k: Var,
        seg: usize,
        scale: f64,
    },
    SegApply {
        a: Var,
        v: Var,
        seg: usize,
    },
    SegMean {
        x: Var,
        seg: usize,
        weights: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Probability clamp used by the BCE node.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every parameter of a store.
#[derive(Debug, Clone)]
pub struct Gradients {
    tensors: Vec<Tensor>,
    reached: Vec<bool>,
}

impl Gradients {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        let reached = vec![true; tensors.len()];
        Self { tensors, reached }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn reached(&self, id: ParamId) -> bool {
        self.reached[id.0]
    }

    /// Parameters the loss does not depend on; their gradient is reported as zero.
    pub fn missing(&self) -> Vec<ParamId> {
        self.reached
            .iter()
            .enumerate()
            .filter(|(_, r)| !**r)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn require_all(&self, store: &ParamStore) -> Result<()> {
        let missing = self.missing();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingGradient(
                missing.iter().map(|&p| store.name(p).to_string()).collect(),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotate consecutive pairs `(2i, 2i+1)` of the first `rot_width` columns of
/// each row by `pos * base^(-2i/rot_width)`; `inverse` rotates the other way.
pub(crate) fn rope_rotate(
    data: &mut [f64],
    cols: usize,
    positions: &[usize],
    rot_width: usize,
    base: f64,
    inverse: bool,
) {
    debug_assert!(rot_width.is_multiple_of(2) && rot_width <= cols);
    let half = rot_width / 2;
    let thetas: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / rot_width as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = &mut data[r * cols..(r + 1) * cols];
        for (i, &theta) in thetas.iter().enumerate() {
            let angle = pos as f64 * theta;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Register a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_with(&self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Add a `[1, n]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let cols = ta.cols();
        for r in 0..ta.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), cols);
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiply `a` by a learnable `[1, 1]` scalar.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::Shape(format!("scale_var expects a scalar, got {:?}", ts.shape())));
        }
        let c = ts.data()[0];
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::ScaleVar(a, s)))
    }

    /// Elementwise product with a constant (dropout or row masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(shape_err("mul_const", ta, &c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// `out[i, j] = cos(freqs[j] * dts[i])` for active rows, zero otherwise.
    pub fn time_encode(&mut self, freqs: Var, dts: Vec<f64>, active: Vec<bool>) -> Result<Var> {
        if dts.len() != active.len() {
            return Err(Error::Shape("time_encode: dts/active length mismatch".into()));
        }
        let f = self.value(freqs);
        let width = f.len();
        let mut out = Tensor::zeros(&[dts.len(), width]);
        for (i, (&dt, &on)) in dts.iter().zip(&active).enumerate() {
            if on {
                for (o, &fj) in out.row_mut(i).iter_mut().zip(f.data()) {
                    *o = (fj * dt).cos();
                }
            }
        }
        Ok(self.push(out, Op::TimeEncode { freqs, dts, active }))
    }

    /// Row softmax; `mask[i]` false excludes that entry (probability 0).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = super::softmax_rows(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// `x / sqrt(mean(x^2) + eps)` per row, times an optional `[1, n]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if let Some(g) = gain {
            if self.value(g).len() != cols {
                return Err(shape_err("rms_norm", tx, self.value(g)));
            }
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols.max(1) as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        if let Some(g) = gain {
            let gv = self.value(g).data().to_vec();
            for r in 0..out.rows() {
                for (o, &gj) in out.row_mut(r).iter_mut().zip(&gv) {
                    *o *= gj;
                }
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary embedding of the first `rot_width` columns (must be even).
    pub fn rope(&mut self, x: Var, positions: Vec<usize>, rot_width: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        if !rot_width.is_multiple_of(2) || rot_width > tx.cols() {
            return Err(Error::Config(format!(
                "rope width {rot_width} must be even and <= {}",
                tx.cols()
            )));
        }
        if positions.len() != tx.rows() {
            return Err(Error::Shape("rope: one position per row required".into()));
        }
        let mut out = tx.clone();
        let cols = out.cols();
        rope_rotate(out.data_mut(), cols, &positions, rot_width, base, false);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions,
                rot_width,
                base,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let cols = tx.cols();
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::matrix(len, cols, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Block-diagonal attention scores for row-stacked sequences of length
    /// `seg`: row `r` of segment `b` holds `scale * q_r . k_{b*seg + j}`.
    pub fn seg_scores(&mut self, q: Var, k: Var, seg: usize, scale: f64) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        if tq.shape() != tk.shape() || seg == 0 || tq.rows() % seg != 0 {
            return Err(shape_err("seg_scores", tq, tk));
        }
        let (rows, w) = (tq.rows(), tq.cols());
        let mut out = vec![0.0; rows * seg];
        for b in 0..rows / seg {
            let qs = &tq.data()[b * seg * w..(b + 1) * seg * w];
            let ks = &tk.data()[b * seg * w..(b + 1) * seg * w];
            matmul_bt_into(qs, ks, &mut out[b * seg * seg..(b + 1) * seg * seg], seg, w, seg);
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let out = Tensor::matrix(rows, seg, out)?;
        Ok(self.push(out, Op::SegScores { q, k, seg, scale }))
    }

    /// Apply per-segment attention weights `a` (`[rows, seg]`) to values `v`.
    pub fn seg_apply(&mut self, a: Var, v: Var, seg: usize) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.cols() != seg || ta.rows() != tv.rows() || seg == 0 || ta.rows() % seg != 0 {
            return Err(shape_err("seg_apply", ta, tv));
        }
        let (rows, w) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; rows * w];
        for b in 0..rows / seg {
            let asub = &ta.data()[b * seg * seg..(b + 1) * seg * seg];
            let vsub = &tv.data()[b * seg * w..(b + 1) * seg * w];
            matmul_into(asub, vsub, &mut out[b * seg * w..(b + 1) * seg * w], seg, seg, w);
        }
        let out = Tensor::matrix(rows, w, out)?;
        Ok(self.push(out, Op::SegApply { a, v, seg }))
    }

    /// Mean over the rows of each segment where `mask` is true.
    pub fn seg_mean(&mut self, x: Var, seg: usize, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if seg == 0 || !tx.rows().is_multiple_of(seg) || mask.len() != tx.rows() {
            return Err(Error::Shape(format!(
                "seg_mean: {:?} with segment {seg} and {} mask rows",
                tx.shape(),
                mask.len()
            )));
        }
        let (rows, w) = (tx.rows(), tx.cols());
        let nseg = rows / seg;
        let mut weights = vec![0.0; rows];
        let mut out = vec![0.0; nseg * w];
        for b in 0..nseg {
            let count = mask[b * seg..(b + 1) * seg].iter().filter(|m| **m).count();
            if count == 0 {
                return Err(Error::Shape(format!("segment {b} has no valid rows")));
            }
            let wgt = 1.0 / count as f64;
            let orow = &mut out[b * w..(b + 1) * w];
            for r in b * seg..(b + 1) * seg {
                if mask[r] {
                    weights[r] = wgt;
                    for (o, &xv) in orow.iter_mut().zip(tx.row(r)) {
                        *o += xv;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o *= wgt);
        }
        let out = Tensor::matrix(nseg, w, out)?;
        Ok(self.push(out, Op::SegMean { x, seg, weights }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels,
    /// with `p` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "bce: {} probabilities, {} labels",
                tp.len(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, labels }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        let mut out_grads: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut reached = vec![false; store.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if id.0 < out_grads.len() {
                        out_grads[id.0] = g;
                        reached[id.0] = true;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(ta.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *a, ta.shape(), ga);
                    accumulate(&mut grads, *b, tb.shape(), gb);
                }
                Op::Add(a, b) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.data().to_vec());
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, g.shape(), neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ta.shape(), ga);
                    accumulate(&mut grads, *b, tb.shape(), gb);
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, &v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *bias, self.value(*bias).shape(), gb);
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::Scale(a, c) => {
                    let ga = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::ScaleVar(a, s) => {
                    let c = self.value(*s).data()[0];
                    let gs = dot(g.data(), self.value(*a).data());
                    let ga = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                    accumulate(&mut grads, *s, self.value(*s).shape(), vec![gs]);
                }
                Op::MulConst(a, c) => {
                    let ga = g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Silu(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Ln(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, x)| gv / x)
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::TimeEncode { freqs, dts, active } => {
                    let f = self.value(*freqs);
                    let mut gf = vec![0.0; f.len()];
                    for (i, (&dt, &on)) in dts.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        for (j, (&gv, &fj)) in g.row(i).iter().zip(f.data()).enumerate() {
                            gf[j] -= gv * dt * (fj * dt).sin();
                        }
                    }
                    accumulate(&mut grads, *freqs, f.shape(), gf);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for j in 0..cols {
                            ga[r * cols + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), ga);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let gain_v = gain.map(|gv| self.value(gv).data().to_vec());
                    let mut gx = vec![0.0; tx.len()];
                    let mut ggain = vec![0.0; cols];
                    for r in 0..tx.rows() {
                        let inv = inv_rms[r];
                        let xr = tx.row(r);
                        let gr = g.row(r);
                        // gradient w.r.t. the normalized row
                        let gn: Vec<f64> = match &gain_v {
                            Some(gv) => gr.iter().zip(gv).map(|(a, b)| a * b).collect(),
                            None => gr.to_vec(),
                        };
                        if gain_v.is_some() {
                            for j in 0..cols {
                                ggain[j] += gr[j] * xr[j] * inv;
                            }
                        }
                        let proj = gn.iter().zip(xr).map(|(a, b)| a * b * inv).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gx[r * cols + j] = inv * (gn[j] - xr[j] * inv * proj);
                        }
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                    if let Some(gv) = gain {
                        accumulate(&mut grads, *gv, self.value(*gv).shape(), ggain);
                    }
                }
                Op::Rope {
                    x,
                    positions,
                    rot_width,
                    base,
                } => {
                    let mut gx = g;
                    let cols = gx.cols();
                    rope_rotate(gx.data_mut(), cols, positions, *rot_width, *base, true);
                    let shape = gx.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, gx.into_data());
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (cols, len) = (tx.cols(), g.cols());
                    let mut gx = vec![0.0; tx.len()];
                    for r in 0..tx.rows() {
                        gx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    gx[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, tx.shape(), gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let w = tp.cols();
                        let mut gp = Vec::with_capacity(tp.len());
                        for r in 0..tp.rows() {
                            gp.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, tp.shape(), gp);
                    }
                }
                Op::SegScores { q, k, seg, scale } => {
                    let (tq, tk) = (self.value(*q), self.value(*k));
                    let (rows, w, seg) = (tq.rows(), tq.cols(), *seg);
                    let gs: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
                    let mut gq = vec![0.0; rows * w];
                    let mut gk = vec![0.0; rows * w];
                    for b in 0..rows / seg {
                        let rng = b * seg * w..(b + 1) * seg * w;
                        let gsub = &gs[b * seg * seg..(b + 1) * seg * seg];
                        matmul_into(gsub, &tk.data()[rng.clone()], &mut gq[rng.clone()], seg, seg, w);
                        matmul_at_into(gsub, &tq.data()[rng.clone()], &mut gk[rng], seg, seg, w);
                    }
                    accumulate(&mut grads, *q, tq.shape(), gq);
                    accumulate(&mut grads, *k, tk.shape(), gk);
                }
                Op::SegApply { a, v, seg } => {
                    let (ta, tv) = (self.value(*a), self.value(*v));
                    let (rows, w, seg) = (tv.rows(), tv.cols(), *seg);
                    let mut ga = vec![0.0; rows * seg];
                    let mut gv = vec![0.0; rows * w];
                    for b in 0..rows / seg {
                        let vr = b * seg * w..(b + 1) * seg * w;
                        let ar = b * seg * seg..(b + 1) * seg * seg;
                        matmul_bt_into(&g.data()[vr.clone()], &tv.data()[vr.clone()], &mut ga[ar.clone()], seg, w, seg);
                        matmul_at_into(&ta.data()[ar], &g.data()[vr.clone()], &mut gv[vr], seg, seg, w);
                    }
                    accumulate(&mut grads, *a, ta.shape(), ga);
                    accumulate(&mut grads, *v, tv.shape(), gv);
                }
                Op::SegMean { x, seg, weights } => {
                    let tx = self.value(*x);
                    let w = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    for (r, &wt) in weights.iter().enumerate() {
                        if wt != 0.0 {
                            let grow = g.row(r / seg);
                            for (o, &gv) in gx[r * w..(r + 1) * w].iter_mut().zip(grow) {
                                *o = gv * wt;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                }
                Op::SumAll(a) => {
                    let ta = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, ta.shape(), vec![gv; ta.len()]);
                }
                Op::MeanAll(a) => {
                    let ta = self.value(*a);
                    let gv = g.data()[0] / ta.len().max(1) as f64;
                    accumulate(&mut grads, *a, ta.shape(), vec![gv; ta.len()]);
                }
                Op::Bce { p, labels } => {
                    let tp = self.value(*p);
                    let n = labels.len() as f64;
                    let gl = g.data()[0];
                    let gp = tp
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                gl * (-y / p + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, tp.shape(), gp);
                }
            }
        }
        Ok(Gradients {
            tensors: out_grads,
            reached,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}
