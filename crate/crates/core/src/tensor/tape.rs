use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{matmul_raw, softmax_rows, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddIdentity(Var),
    Hadamard(Var, Var),
    MulScalar(Var, Var),
    Relu(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Trace(Var),
    FrobeniusNorm(Var),
    Reshape(Var),
    CenterColumns(Var),
    MeanRows(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NllRows(Var, Vec<usize>),
    UpperTriVec(Var),
    ConcatRows(Vec<Var>),
    NormalizeRows(Var, f64),
    Reverse(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations so that a single reverse sweep can produce
/// gradients for every leaf marked as requiring them.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and the reverse sweep is a plain backwards walk.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(Error::contract(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ))
    }
}

fn require_square(op: &'static str, t: &Tensor) -> Result<usize> {
    let (r, c) = require_matrix(op, t)?;
    if r != c {
        return Err(Error::contract(op, format!("expected a square matrix, got {r}x{c}")));
    }
    Ok(r)
}

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
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

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records an input whose gradient will be collected.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::MulScalar(a, b)
            | Op::AddChannelBias(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddIdentity(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Trace(a)
            | Op::FrobeniusNorm(a)
            | Op::Reshape(a)
            | Op::CenterColumns(a)
            | Op::MeanRows(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::NllRows(a, _)
            | Op::UpperTriVec(a)
            | Op::NormalizeRows(a, _)
            | Op::Reverse(a, _) => vec![*a],
            Op::ConcatRows(vs) => vs.clone(),
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = require_matrix("matmul", ta)?;
        let (q2, r) = require_matrix("matmul", tb)?;
        if q != q2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = Tensor::new(vec![p, r], matmul_raw(ta.data(), tb.data(), p, q, r))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = require_matrix("transpose", ta)?;
        let out = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        self.push("hadamard", out, Op::Hadamard(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c))
    }

    /// `a + c·I` for a square matrix `a`.
    pub fn add_identity(&mut self, a: Var, c: f64) -> Result<Var> {
        let d = require_square("add_identity", self.value(a))?;
        let mut out = self.value(a).clone();
        for i in 0..d {
            out.data_mut()[i * d + i] += c;
        }
        self.push("add_identity", out, Op::AddIdentity(a))
    }

    /// Multiplies tensor `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::contract("mul_scalar", "scalar operand must have one element"));
        }
        let c = ts.item();
        let out = self.value(a).map(|v| v * c);
        self.push("mul_scalar", out, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::log);
        self.push("log", out, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::sqrt);
        self.push("sqrt", out, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push("recip", out, Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", out, Op::Mean(a))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = require_square("trace", t)?;
        let out = Tensor::scalar((0..d).map(|i| t.at(i, i)).sum());
        self.push("trace", out, Op::Trace(a))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).frobenius_norm());
        self.push("frobenius_norm", out, Op::FrobeniusNorm(a))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Subtracts each column's mean from that column.
    pub fn center_columns(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = require_matrix("center_columns", t)?;
        let means = column_means(t.data(), n, d);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        self.push("center_columns", out, Op::CenterColumns(a))
    }

    /// Column means of an `n×d` matrix as a `1×d` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = require_matrix("mean_rows", t)?;
        let out = Tensor::new(vec![1, d], column_means(t.data(), n, d))?;
        self.push("mean_rows", out, Op::MeanRows(a))
    }

    /// Cross-correlation of a `c_in×H×W` input with a `c_out×c_in×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let geom = ConvGeom::new(tx, tk, stride, padding)?;
        let out = geom.forward(tx.data(), tk.data());
        let out = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// Adds `bias[c]` to every spatial position of channel `c` of a `c×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 3 || tb.numel() != tx.shape()[0] {
            return Err(dim_err("add_channel_bias", tx, tb));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let mut out = tx.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = tb.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push("add_channel_bias", out, Op::AddChannelBias(x, bias))
    }

    /// Adds a length-`k` bias to every row of a `b×k` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, k) = require_matrix("add_row_bias", tx)?;
        if tb.numel() != k {
            return Err(dim_err("add_row_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias(x, bias))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        require_matrix("softmax_rows", self.value(a))?;
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, k) = require_matrix("log_softmax_rows", t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// `-(1/b) Σ_j a[j, labels[j]]`: the negative log-likelihood given log-probabilities.
    pub fn nll_rows(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (b, k) = require_matrix("nll_rows", t)?;
        if labels.len() != b {
            return Err(Error::contract(
                "nll_rows",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(
                "nll_rows",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let total: f64 = labels.iter().enumerate().map(|(j, &y)| t.at(j, y)).sum();
        let out = Tensor::scalar(-total / b as f64);
        self.push("nll_rows", out, Op::NllRows(a, labels.to_vec()))
    }

    /// Row-major upper triangle (diagonal included) of a symmetric matrix, as a `1×m` row.
    pub fn upper_tri_vec(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = require_square("upper_tri_vec", t)?;
        let asym = t.asymmetry();
        if asym > 1e-8 {
            return Err(Error::contract(
                "upper_tri_vec",
                format!("matrix asymmetric by {asym:e}"),
            ));
        }
        let mut v = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                v.push(t.at(i, j));
            }
        }
        let out = Tensor::new(vec![1, v.len()], v)?;
        self.push("upper_tri_vec", out, Op::UpperTriVec(a))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "no inputs"))?;
        let (_, c) = require_matrix("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c2) = require_matrix("concat_rows", t)?;
            if c2 != c {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Divides each row `w` by `max(‖w‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (_, m) = require_matrix("normalize_rows", t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(m) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            row.iter_mut().for_each(|v| *v /= norm.max(eps));
        }
        self.push("normalize_rows", out, Op::NormalizeRows(a, eps))
    }

    /// Identity in the forward pass; the backward pass multiplies the incoming
    /// gradient by `factor`.
    pub fn reverse_gradient(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).clone();
        self.push("reverse_gradient", out, Op::Reverse(a, factor))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Propagates gradients from the scalar `loss` to every ancestor that
    /// requires them. Consumers of the same node accumulate by summation.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("seed must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                slots[idx] = None;
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.propagate(node, &g, &mut slots)?;
            slots[idx] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.rows(), ta.cols());
                let r = tb.cols();
                if self.requires_grad(*a) {
                    let bt = transpose_raw(tb.data(), q, r);
                    let ga = matmul_raw(g.data(), &bt, p, r, q);
                    self.accumulate(slots, *a, shaped(ta, ga)?);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(ta.data(), p, q);
                    let gb = matmul_raw(&at, g.data(), q, p, r);
                    self.accumulate(slots, *b, shaped(tb, gb)?);
                }
            }
            Op::Transpose(a) => {
                let ga = transpose_raw(g.data(), g.rows(), g.cols());
                self.accumulate(slots, *a, shaped(self.value(*a), ga)?);
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.map(|v| -v));
            }
            Op::Scale(a, c) => self.accumulate(slots, *a, g.map(|v| v * c)),
            Op::Reverse(a, factor) => self.accumulate(slots, *a, g.map(|v| v * factor)),
            Op::AddIdentity(a) => self.accumulate(slots, *a, g.clone()),
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(slots, *a, shaped(ta, ga)?);
                }
                if self.requires_grad(*b) {
                    let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(slots, *b, shaped(tb, gb)?);
                }
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let c = ts.item();
                self.accumulate(slots, *a, g.map(|v| v * c));
                if self.requires_grad(*s) {
                    let gs: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    self.accumulate(slots, *s, shaped(ts, vec![gs])?);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let ga = g.data().iter().zip(ta.data()).map(|(gv, x)| gv / x).collect();
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
            Op::Sqrt(a) => {
                let ga = g.data().iter().zip(out.data()).map(|(gv, y)| 0.5 * gv / y).collect();
                self.accumulate(slots, *a, shaped(self.value(*a), ga)?);
            }
            Op::Recip(a) => {
                let ga = g.data().iter().zip(out.data()).map(|(gv, y)| -gv * y * y).collect();
                self.accumulate(slots, *a, shaped(self.value(*a), ga)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(slots, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let n = ta.numel() as f64;
                self.accumulate(slots, *a, Tensor::full(ta.shape(), g.item() / n));
            }
            Op::Trace(a) => {
                let d = self.value(*a).rows();
                let mut ga = Tensor::identity(d);
                ga.data_mut().iter_mut().for_each(|v| *v *= g.item());
                self.accumulate(slots, *a, ga);
            }
            Op::FrobeniusNorm(a) => {
                let ta = self.value(*a);
                let norm = out.item();
                let k = if norm > 0.0 { g.item() / norm } else { 0.0 };
                self.accumulate(slots, *a, ta.map(|v| v * k));
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.value(*a).shape())?;
                self.accumulate(slots, *a, ga);
            }
            Op::CenterColumns(a) => {
                let (n, d) = (g.rows(), g.cols());
                let means = column_means(g.data(), n, d);
                let mut ga = g.clone();
                for row in ga.data_mut().chunks_mut(d) {
                    for (v, m) in row.iter_mut().zip(&means) {
                        *v -= m;
                    }
                }
                self.accumulate(slots, *a, ga);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (n, d) = (ta.rows(), ta.cols());
                let inv = 1.0 / n as f64;
                let mut ga = Vec::with_capacity(n * d);
                for _ in 0..n {
                    ga.extend(g.data().iter().map(|v| v * inv));
                }
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let geom = ConvGeom::new(tx, tk, *stride, *padding)?;
                if self.requires_grad(*x) {
                    let gx = geom.backward_input(g.data(), tk.data());
                    self.accumulate(slots, *x, shaped(tx, gx)?);
                }
                if self.requires_grad(*kernel) {
                    let gk = geom.backward_kernel(g.data(), tx.data());
                    self.accumulate(slots, *kernel, shaped(tk, gk)?);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(slots, *x, g.clone());
                if self.requires_grad(*bias) {
                    let plane = g.shape()[1] * g.shape()[2];
                    let gb = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    self.accumulate(slots, *bias, shaped(self.value(*bias), gb)?);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(slots, *x, g.clone());
                if self.requires_grad(*bias) {
                    let k = g.cols();
                    let gb = column_sums(g.data(), g.rows(), k);
                    self.accumulate(slots, *bias, shaped(self.value(*bias), gb)?);
                }
            }
            Op::SoftmaxRows(a) => {
                let k = out.cols();
                let mut ga = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                }
                self.accumulate(slots, *a, shaped(out, ga)?);
            }
            Op::LogSoftmaxRows(a) => {
                let k = out.cols();
                let mut ga = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - libm::exp(*y) * total));
                }
                self.accumulate(slots, *a, shaped(out, ga)?);
            }
            Op::NllRows(a, labels) => {
                let ta = self.value(*a);
                let (b, k) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; b * k];
                let w = -g.item() / b as f64;
                for (j, &y) in labels.iter().enumerate() {
                    ga[j * k + y] = w;
                }
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
            Op::UpperTriVec(a) => {
                let ta = self.value(*a);
                let d = ta.rows();
                let mut ga = vec![0.0; d * d];
                let mut idx = 0;
                for i in 0..d {
                    for j in i..d {
                        let gv = g.data()[idx];
                        if i == j {
                            ga[i * d + i] = gv;
                        } else {
                            ga[i * d + j] = 0.5 * gv;
                            ga[j * d + i] = 0.5 * gv;
                        }
                        idx += 1;
                    }
                }
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let len = tp.numel();
                    if self.requires_grad(p) {
                        let gp = g.data()[offset..offset + len].to_vec();
                        self.accumulate(slots, p, shaped(tp, gp)?);
                    }
                    offset += len;
                }
            }
            Op::NormalizeRows(a, eps) => {
                let ta = self.value(*a);
                let m = ta.cols();
                let mut ga = Vec::with_capacity(ta.numel());
                for (grow, wrow) in g.data().chunks(m).zip(ta.data().chunks(m)) {
                    let norm = libm::sqrt(wrow.iter().map(|v| v * v).sum::<f64>());
                    let denom = norm.max(*eps);
                    let dot: f64 = grow.iter().zip(wrow).map(|(x, y)| x * y).sum();
                    // Below the floor the denominator is constant.
                    let radial = if norm > *eps { dot / (norm * norm * norm) } else { 0.0 };
                    ga.extend(grow.iter().zip(wrow).map(|(gv, w)| gv / denom - radial * w));
                }
                self.accumulate(slots, *a, shaped(ta, ga)?);
            }
        }
        Ok(())
    }
}

fn column_sums(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut sums = vec![0.0; d];
    for row in data.chunks(d).take(n) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

fn column_means(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = column_sums(data, n, d);
    let inv = 1.0 / n as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(dim_err("conv2d", x, k));
        }
        let h_out = conv_out_extent(xs[1], ks[2], stride, padding);
        let w_out = conv_out_extent(xs[2], ks[3], stride, padding);
        let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
            return Err(dim_err("conv2d", x, k));
        };
        Ok(ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            h_out,
            w_out,
            stride,
            padding,
        })
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pad, s) = (self.padding as isize, self.stride as isize);
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let kidx = ((co * self.c_in + ci) * self.kh + ki) * self.kw + kj;
                        for oi in 0..self.h_out {
                            let ii = oi as isize * s + ki as isize - pad;
                            if ii < 0 || ii >= self.h as isize {
                                continue;
                            }
                            let in_row = (ci * self.h + ii as usize) * self.w;
                            let out_row = (co * self.h_out + oi) * self.w_out;
                            for oj in 0..self.w_out {
                                let jj = oj as isize * s + kj as isize - pad;
                                if jj < 0 || jj >= self.w as isize {
                                    continue;
                                }
                                f(out_row + oj, in_row + jj as usize, kidx);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c_out * self.h_out * self.w_out];
        self.for_each_tap(|o, i, kk| out[o] += k[kk] * x[i]);
        out
    }

    fn backward_input(&self, g: &[f64], k: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.c_in * self.h * self.w];
        self.for_each_tap(|o, i, kk| gx[i] += k[kk] * g[o]);
        gx
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gk = vec![0.0; self.c_out * self.c_in * self.kh * self.kw];
        self.for_each_tap(|o, i, kk| gk[kk] += x[i] * g[o]);
        gk
    }
}
