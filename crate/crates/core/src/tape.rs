//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op executed during one forward pass. Values are
//! immutable once recorded. [`Tape::backward`] walks the record in reverse
//! and returns a fresh [`Gradients`] map without touching the tape, so it can
//! be called repeatedly with identical results.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    /// Keeps the tanh term of each element for the reverse pass.
    Gelu(Var, Vec<f64>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MaskCols(Var, Vec<f64>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    StopGrad,
    SteThreshold(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Deliberate corruption of a reverse rule, used as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReverseFault {
    /// Multiplies the GELU derivative by the given factor.
    GeluSlope(f64),
    /// Drops the `dL/db` term of every matmul.
    MatMulDropRhs,
}

pub struct Tape {
    nodes: Vec<Node>,
    ste_surrogate: bool,
    fault: Option<ReverseFault>,
    matmul_flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[cfg(test)]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    // exp-based tanh; about three times faster than libm's and accurate to
    // a few ulps of 1, which is all GELU needs.
    if u.abs() > 20.0 {
        u.signum()
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    }
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            ste_surrogate: true,
            fault: None,
            matmul_flops: 0,
        }
    }

    /// A tape whose straight-through ops pass no gradient, so that reverse
    /// accumulation yields the exact derivative of the piecewise-smooth
    /// forward function. Used for finite-difference verification.
    pub fn without_ste_surrogate() -> Self {
        Self {
            ste_surrogate: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: ReverseFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (2 per MAC) spent in matmuls recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).as_slice(),
            (m, k),
            false,
            self.value(b).as_slice(),
            (k, n),
            false,
            &mut out,
            false,
        );
        self.matmul_flops += 2 * (m * k * n) as u64;
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), &[a], "offset")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let th: Vec<f64> = x.as_slice().iter().map(|&v| gelu_tanh(v)).collect();
        let out = x.as_slice().iter().zip(&th).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::Gelu(a, th), &[a], "gelu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.as_slice().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::Softmax(a), &[a], "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// Mean over all entries, as a `[1, 1]` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.as_slice().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// Mean over rows: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for row in x.as_slice().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, end]));
        }
        let w = end - start;
        let x = self.value(a).as_slice();
        let mut out = Vec::with_capacity(r * w);
        for row in x.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            Tensor::from_parts(vec![r, w], out),
            Op::SliceCols(a, start),
            &[a],
            "slice_cols",
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, end]));
        }
        let out = self.value(a).as_slice()[start * c..end * c].to_vec();
        self.push(
            Tensor::from_parts(vec![end - start, c], out),
            Op::SliceRows(a, start),
            &[a],
            "slice_rows",
        )
    }

    /// Multiplies every row elementwise by a constant column mask.
    pub fn mask_cols(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let c = self.value(a).cols();
        if mask.len() != c {
            return Err(Error::shape("mask_cols", self.shape(a), &[mask.len()]));
        }
        let x = self.value(a);
        let mut out = x.as_slice().to_vec();
        for row in out.chunks_mut(c) {
            for (o, m) in row.iter_mut().zip(mask) {
                *o *= m;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::MaskCols(a, mask.to_vec()), &[a], "mask_cols")
    }

    fn check_row(&self, op: &'static str, m: Var, v: Var) -> Result<()> {
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != self.value(m).cols() {
            return Err(Error::shape(op, self.shape(m), self.shape(v)));
        }
        Ok(())
    }

    /// Adds a `[1, C]` row vector to every row of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check_row("add_row", m, v)?;
        let c = self.value(m).cols();
        let mut out = self.value(m).as_slice().to_vec();
        let row = self.value(v).as_slice();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(row) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(self.shape(m).to_vec(), out);
        self.push(value, Op::AddRow(m, v), &[m, v], "add_row")
    }

    /// Multiplies every row of `m` elementwise by a `[1, C]` row vector.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check_row("mul_row", m, v)?;
        let c = self.value(m).cols();
        let mut out = self.value(m).as_slice().to_vec();
        let row = self.value(v).as_slice();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(row) {
                *o *= b;
            }
        }
        let value = Tensor::from_parts(self.shape(m).to_vec(), out);
        self.push(value, Op::MulRow(m, v), &[m, v], "mul_row")
    }

    /// Multiplies every entry of `m` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(m), self.shape(s)));
        }
        let k = self.value(s).item();
        let v = self.value(m).map(|x| x * k);
        self.push(v, Op::MulScalar(m, s), &[m, s], "mul_scalar")
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let r = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            let c = x.cols();
            for (i, row) in x.as_slice().chunks(c).enumerate() {
                out[i * total + offset..i * total + offset + c].copy_from_slice(row);
            }
            offset += c;
        }
        self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a).as_slice();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a], "transpose")
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis, no affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain {
                what: "layer_norm eps",
                value: eps,
            });
        }
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.as_slice().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(value, Op::LayerNorm { x: a, inv_std }, &[a], "layer_norm")
    }

    /// Identity forward, no gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, &[], "stop_gradient")
    }

    /// Straight-through hard threshold: forward `1[p >= tau]`, backward
    /// identity (unless this tape has the surrogate disabled).
    ///
    /// Equivalent to `1[p >= tau] + p - stop_gradient(p)` with an exact
    /// forward value.
    pub fn ste_threshold(&mut self, p: Var, tau: f64) -> Result<Var> {
        let v = self.value(p).map(|x| if x >= tau { 1.0 } else { 0.0 });
        self.push(v, Op::SteThreshold(p), &[p], "ste_threshold")
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Every differentiable leaf gets an entry; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.reverse_rule(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn reverse_rule(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.shape(*a));
                    gemm(
                        g.as_slice(),
                        (m, n),
                        false,
                        self.value(*b).as_slice(),
                        (k, n),
                        true,
                        ga.as_mut_slice(),
                        true,
                    );
                }
                if self.needs(*b) && self.fault != Some(ReverseFault::MatMulDropRhs) {
                    let gb = slot(grads, *b, self.shape(*b));
                    gemm(
                        self.value(*a).as_slice(),
                        (m, k),
                        true,
                        g.as_slice(),
                        (m, n),
                        false,
                        gb.as_mut_slice(),
                        true,
                    );
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |_| g.clone());
                self.accum(grads, *b, |_| g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |_| g.clone());
                self.accum(grads, *b, |_| g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, |t| g.zip_map(t.value(*b), |g, y| g * y));
                self.accum(grads, *b, |t| g.zip_map(t.value(*a), |g, x| g * x));
            }
            Op::Scale(a, c) => self.accum(grads, *a, |_| g.map(|v| c * v)),
            Op::Offset(a) => self.accum(grads, *a, |_| g.clone()),
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, |t| Tensor::full(t.shape(*a), s))
            }
            Op::Sigmoid(a) => self.accum(grads, *a, |_| g.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Gelu(a, th) => {
                let scale = match self.fault {
                    Some(ReverseFault::GeluSlope(s)) => s,
                    _ => 1.0,
                };
                self.accum(grads, *a, |t| {
                    let x = t.value(*a).as_slice();
                    let d = g
                        .as_slice()
                        .iter()
                        .zip(x.iter().zip(th))
                        .map(|(g, (&x, &th))| g * gelu_grad(x, th) * scale)
                        .collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                })
            }
            Op::Softmax(a) => self.accum(grads, *a, |_| {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.as_slice().chunks(c).zip(out.as_slice().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                Tensor::from_parts(out.shape().to_vec(), d)
            }),
            Op::Mean(a) => {
                let s = g.item() / self.value(*a).len() as f64;
                self.accum(grads, *a, |t| Tensor::full(t.shape(*a), s))
            }
            Op::MeanRows(a) => {
                let r = self.value(*a).rows() as f64;
                self.accum(grads, *a, |t| {
                    let x = t.value(*a);
                    let mut d = Vec::with_capacity(x.len());
                    for _ in 0..x.rows() {
                        d.extend(g.as_slice().iter().map(|v| v / r));
                    }
                    Tensor::from_parts(x.shape().to_vec(), d)
                })
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let w = g.cols();
                    let ga = slot(grads, *a, self.shape(*a));
                    for (dst, src) in ga.as_mut_slice().chunks_mut(c).zip(g.as_slice().chunks(w)) {
                        for (d, s) in dst[*start..*start + w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let ga = slot(grads, *a, self.shape(*a));
                    let dst = &mut ga.as_mut_slice()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                        *d += s;
                    }
                }
            }
            Op::MaskCols(a, mask) => self.accum(grads, *a, |_| {
                let c = mask.len();
                let mut d = g.as_slice().to_vec();
                for row in d.chunks_mut(c) {
                    for (v, m) in row.iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), d)
            }),
            Op::AddRow(m, v) => {
                self.accum(grads, *m, |_| g.clone());
                self.accum(grads, *v, |_| column_sums(g, None));
            }
            Op::MulRow(m, v) => {
                self.accum(grads, *m, |t| {
                    let row = t.value(*v).as_slice();
                    let c = row.len();
                    let mut d = g.as_slice().to_vec();
                    for chunk in d.chunks_mut(c) {
                        for (x, r) in chunk.iter_mut().zip(row) {
                            *x *= r;
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                self.accum(grads, *v, |t| column_sums(g, Some(t.value(*m))));
            }
            Op::MulScalar(m, s) => {
                self.accum(grads, *m, |t| {
                    let k = t.value(*s).item();
                    g.map(|v| v * k)
                });
                self.accum(grads, *s, |t| {
                    let dot = g
                        .as_slice()
                        .iter()
                        .zip(t.value(*m).as_slice())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                    Tensor::from_parts(t.shape(*s).to_vec(), vec![dot])
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let gp = slot(grads, p, self.shape(p));
                        for (dst, src) in
                            gp.as_mut_slice().chunks_mut(c).zip(g.as_slice().chunks(total))
                        {
                            for (d, s) in dst.iter_mut().zip(&src[offset..offset + c]) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, |t| {
                let (r, c) = t.dims(*a);
                let src = g.as_slice();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = src[j * r + i];
                    }
                }
                Tensor::from_parts(t.shape(*a).to_vec(), d)
            }),
            Op::LayerNorm { x, inv_std } => self.accum(grads, *x, |_| {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for ((gr, yr), is) in g
                    .as_slice()
                    .chunks(c)
                    .zip(out.as_slice().chunks(c))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    d.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mean_g - y * mean_gy)));
                }
                Tensor::from_parts(out.shape().to_vec(), d)
            }),
            Op::SteThreshold(p) => {
                if self.ste_surrogate {
                    self.accum(grads, *p, |_| g.clone());
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&Self) -> Tensor) {
        if !self.needs(v) {
            return;
        }
        let d = f(self);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            empty => *empty = Some(d),
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn column_sums(g: &Tensor, weight: Option<&Tensor>) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    match weight {
        None => {
            for row in g.as_slice().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        Some(w) => {
            for (row, wr) in g.as_slice().chunks(c).zip(w.as_slice().chunks(c)) {
                for ((o, v), x) in out.iter_mut().zip(row).zip(wr) {
                    *o += v * x;
                }
            }
        }
    }
    Tensor::from_parts(vec![1, c], out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Gradients produced by one reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in
    /// differentiation.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for variable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numeric_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let im = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(im), tape.value(m));
        let mz = tape.matmul(m, z).unwrap();
        assert_eq!(tape.value(mz).as_slice(), &[0.0; 4]);
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[5.0]]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).item(), 13.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(&[5.0; 4]));
        let y = tape.layer_norm(c, 1e-6).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0; 4]);
        let s = tape.constant(Tensor::row(&[-1.0, 1.0]));
        let y = tape.layer_norm(s, 1e-6).unwrap();
        let v = tape.value(y).as_slice();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stop_gradient_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0, 3.0]));
        let s = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[0.0; 3]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[2.0]));
        let s = tape.stop_gradient(x).unwrap();
        let p = tape.mul(x, s).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, -2.0, 3.0]));
        let unused = tape.param(Tensor::row(&[7.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[2.0, -4.0, 6.0]);
        assert_eq!(g.wrt(unused).as_slice(), &[0.0]);

        // sum(A·B): dA = 1·Bᵀ, dB = Aᵀ·1
        let mut tape = Tape::new();
        let a = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let ab = tape.matmul(a, b).unwrap();
        let loss = tape.sum(ab).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).as_slice(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.wrt(b).as_slice(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let w = tape.param(Tensor::randn(&[6, 5], 1.0, &mut rng));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.softmax(h).unwrap();
        let loss = tape.mean(h).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
        assert_eq!(g1.wrt(w), g2.wrt(w));
    }

    #[test]
    fn ste_matches_composed_definition() {
        for &(p, tau) in &[(0.7, 0.5), (0.3, 0.5), (0.5, 0.5)] {
            let mut tape = Tape::new();
            let pv = tape.param(Tensor::scalar(p));
            let g = tape.ste_threshold(pv, tau).unwrap();
            let expected = if p >= tau { 1.0 } else { 0.0 };
            assert_eq!(tape.value(g).item(), expected);
            let grads = tape.backward(g).unwrap();
            assert_eq!(grads.wrt(pv).item(), 1.0);

            // 1[p >= tau] + p - stop_gradient(p)
            let ind = tape.constant(Tensor::scalar(expected));
            let sg = tape.stop_gradient(pv).unwrap();
            let s = tape.add(ind, pv).unwrap();
            let composed = tape.sub(s, sg).unwrap();
            assert!((tape.value(composed).item() - expected).abs() <= 1e-12);
            let grads = tape.backward(composed).unwrap();
            assert_eq!(grads.wrt(pv).item(), 1.0);
        }
    }

    #[test]
    fn detached_surrogate_passes_no_gradient() {
        let mut tape = Tape::without_ste_surrogate();
        let p = tape.param(Tensor::scalar(0.7));
        let g = tape.ste_threshold(p, 0.5).unwrap();
        let grads = tape.backward(g).unwrap();
        assert_eq!(grads.wrt(p).item(), 0.0);
    }

    #[test]
    fn slice_then_pad_equals_prefix_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        for p in 1..=8 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let sliced = tape.slice_cols(xv, 0, p).unwrap();
            let mask: Vec<f64> = (0..8).map(|j| if j < p { 1.0 } else { 0.0 }).collect();
            let masked = tape.mask_cols(xv, &mask).unwrap();
            let padded = if p < 8 {
                let z = tape.constant(Tensor::zeros(&[3, 8 - p]));
                tape.concat_cols(&[sliced, z]).unwrap()
            } else {
                sliced
            };
            assert_eq!(tape.value(padded), tape.value(masked));
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 7], 10.0, &mut rng));
        let y = tape.softmax(x).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row_slice(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1e200]));
        let y = tape.square(x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn matmul_flops_are_counted() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.matmul_flops(), 2 * 3 * 4 * 5);
    }

    /// Builds `mean(w ⊙ op(x))` for a random weighting `w` so every output
    /// entry contributes a distinct amount.
    fn check_unary(
        shape: &[usize],
        seed: u64,
        op: impl Fn(&mut Tape, Var) -> Result<Var> + Copy,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let eval = |x: &Tensor, rng_seed: u64| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = op(&mut tape, xv).unwrap();
            let mut wr = ChaCha8Rng::seed_from_u64(rng_seed);
            let w = tape.constant(Tensor::randn(tape.shape(y), 1.0, &mut wr));
            let p = tape.mul(y, w).unwrap();
            let loss = tape.sum(p).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).item(), Some(g.wrt(xv).clone()))
        };
        let (_, analytic) = eval(&x0, 77);
        let analytic = analytic.unwrap();
        let numeric = numeric_gradient(
            |v| eval(&Tensor::new(shape, v.to_vec()).unwrap(), 77).0,
            x0.as_slice(),
            1e-6,
        );
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
            assert!(rel < 1e-5, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_unary(&[3, 4], seed, |t, x| t.sigmoid(x));
            check_unary(&[3, 4], seed, |t, x| t.gelu(x));
            check_unary(&[3, 4], seed, |t, x| t.softmax(x));
            check_unary(&[3, 4], seed, |t, x| t.layer_norm(x, 1e-6));
            check_unary(&[3, 4], seed, |t, x| t.mean_rows(x));
            check_unary(&[3, 4], seed, |t, x| t.mean(x));
            check_unary(&[3, 4], seed, |t, x| t.transpose(x));
            check_unary(&[3, 4], seed, |t, x| t.slice_cols(x, 1, 3));
            check_unary(&[3, 4], seed, |t, x| t.slice_rows(x, 0, 2));
            check_unary(&[3, 4], seed, |t, x| t.mask_cols(x, &[1.0, 1.0, 0.0, 0.0]));
            check_unary(&[3, 4], seed, |t, x| t.scale(x, -1.5));
            check_unary(&[3, 4], seed, |t, x| t.offset(x, 0.25));
            check_unary(&[3, 4], seed, |t, x| t.square(x));
            check_unary(&[3, 4], seed, |t, x| {
                let w = t.constant(Tensor::from_parts(
                    vec![4, 2],
                    vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1, 1.1, -0.4],
                ));
                t.matmul(x, w)
            });
            check_unary(&[4, 3], seed, |t, w| {
                let x = t.constant(Tensor::from_parts(vec![2, 4], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()));
                t.matmul(x, w)
            });
            check_unary(&[3, 4], seed, |t, x| {
                let h = t.slice_cols(x, 0, 2)?;
                t.concat_cols(&[x, h])
            });
            check_unary(&[1, 4], seed, |t, v| {
                let m = t.constant(Tensor::from_parts(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()));
                let a = t.add_row(m, v)?;
                t.mul_row(a, v)
            });
            check_unary(&[1, 1], seed, |t, s| {
                let m = t.constant(Tensor::from_parts(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.9, -1.1]));
                t.mul_scalar(m, s)
            });
            check_unary(&[3, 4], seed, |t, m| {
                let s = t.constant(Tensor::scalar(0.7));
                let v = t.constant(Tensor::row(&[0.2, -0.3, 1.5, 0.8]));
                let a = t.mul_scalar(m, s)?;
                let b = t.mul_row(a, v)?;
                let c = t.sub(b, m)?;
                t.add(c, a)
            });
        }
    }

    #[test]
    fn faults_break_reverse_rules() {
        let mut tape = Tape::new();
        tape.inject_fault(ReverseFault::GeluSlope(1.5));
        let x = tape.param(Tensor::row(&[0.3]));
        let y = tape.gelu(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(x).item() - 1.5 * gelu_grad(0.3, gelu_tanh(0.3))).abs() < 1e-15);
    }
}
