//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; inputs always precede
//! the node that consumes them, so the node list is a topological order and
//! [`Graph::backward`] is a single reverse sweep. A fresh graph is built for
//! every training step.
//!
//! ```
//! use catn::graph::Graph;
//! use catn::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! Any op whose output contains NaN or infinity fails with
//! [`Error::NonFinite`] naming the op, and so does the backward sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a × bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Act(Activation, Var),
    Exp(Var),
    LogSigmoid { x: Var, floor: f64 },
    LogSoftmax(Var),
    Outer(Var, Var),
    RowOuter(Var, Var),
    GradReversal(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNormalize { x: Var, radius: f64, eps: f64 },
    Pick(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Act(Activation::Relu, _) => "relu",
            Op::Act(Activation::Tanh, _) => "tanh",
            Op::Act(Activation::Sigmoid, _) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Outer(..) => "outer_product",
            Op::RowOuter(..) => "row_outer",
            Op::GradReversal(..) => "grad_reversal",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::RowNormalize { .. } => "row_normalize",
            Op::Pick(..) => "pick",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

// out[m,n] = a[m,k] × b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[m,n] = a[m,k] × b[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// out[k,n] = a[m,k]ᵀ × b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. Non-finite leaves are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    /// Trainable leaf. Panics on non-finite data; parameters are validated
    /// when they are created and after every optimizer step.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true).expect("parameter values must be finite")
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false).expect("constant values must be finite")
    }

    /// Copies the value of `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Binary(_, a, b)
            | Op::AddRow(a, b)
            | Op::Outer(a, b)
            | Op::RowOuter(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Act(_, a)
            | Op::Exp(a)
            | Op::LogSigmoid { x: a, .. }
            | Op::LogSoftmax(a)
            | Op::GradReversal(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowNormalize { x: a, .. }
            | Op::Pick(a, _) => vec![a],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    /// `a × bᵀ` for `a: [m,k]`, `b: [n,k]`; the affine layers use this with
    /// weights stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_t")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(a), "transpose")?;
        let data = transpose(self.value(a).data(), r, c);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a))
    }

    /// Elementwise binary op. Shapes must match exactly, except that either
    /// operand may be a single-element scalar.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.is_scalar() { t.item() } else { t.data()[i] };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// Adds the vector `b: [n]` to every row of `x: [m,n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_row")?;
        if self.value(b).shape() != [n] {
            return Err(Error::shape(
                "add_row",
                format!("row vector {:?} vs matrix [{m},{n}]", self.value(b).shape()),
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, b))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = match kind {
            Activation::Relu => self.value(x).map(|z| z.max(0.0)),
            Activation::Tanh => self.value(x).map(f64::tanh),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(v, Op::Act(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// `max(log σ(x), ln floor)` elementwise, computed without forming σ(x).
    /// Equivalent to clamping the argument of the log at `floor`.
    pub fn log_sigmoid(&mut self, x: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::Contract(format!("log floor must lie in (0,1), got {floor}")));
        }
        let lf = floor.ln();
        let v = self.value(x).map(|z| log_sigmoid(z).max(lf));
        self.push(v, Op::LogSigmoid { x, floor })
    }

    /// Row-wise log-softmax of a `[batch, C]` matrix, stabilized by
    /// subtracting the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, c) = matrix_dims(self.value(x), "log_softmax")?;
        if c < 2 {
            return Err(Error::shape("log_softmax", format!("need at least 2 classes, got {c}")));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Tensor::new(vec![m, c], data)?, Op::LogSoftmax(x))
    }

    /// Flattened `f pᵀ` of two vectors, row-major: index `i * dp + j`.
    pub fn outer_product(&mut self, f: Var, p: Var) -> Result<Var> {
        let (tf, tp) = (self.value(f), self.value(p));
        if tf.rank() != 1 || tp.rank() != 1 {
            return Err(Error::shape(
                "outer_product",
                format!("expected vectors, got {:?} and {:?}", tf.shape(), tp.shape()),
            ));
        }
        let data: Vec<f64> =
            tf.data().iter().flat_map(|&a| tp.data().iter().map(move |&b| a * b)).collect();
        let n = data.len();
        self.push(Tensor::new(vec![n], data)?, Op::Outer(f, p))
    }

    /// Per-row flattened outer product: `[b, df] × [b, dp] -> [b, df·dp]`.
    pub fn row_outer(&mut self, f: Var, p: Var) -> Result<Var> {
        let (b, df) = matrix_dims(self.value(f), "row_outer")?;
        let (b2, dp) = matrix_dims(self.value(p), "row_outer")?;
        if b != b2 {
            return Err(Error::shape("row_outer", format!("batch {b} vs {b2}")));
        }
        let (tf, tp) = (self.value(f).data(), self.value(p).data());
        let mut data = Vec::with_capacity(b * df * dp);
        for r in 0..b {
            let prow = &tp[r * dp..(r + 1) * dp];
            for &fv in &tf[r * df..(r + 1) * df] {
                data.extend(prow.iter().map(|&pv| fv * pv));
            }
        }
        self.push(Tensor::new(vec![b, df * dp], data)?, Op::RowOuter(f, p))
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-coeff` on the backward pass.
    pub fn grad_reversal(&mut self, x: Var, coeff: f64) -> Result<Var> {
        if !(coeff >= 0.0) || !coeff.is_finite() {
            return Err(Error::Contract(format!("reversal coefficient must be >= 0, got {coeff}")));
        }
        let v = self.value(x).clone();
        self.push(v, Op::GradReversal(x, coeff))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Sums each row of a matrix: `[m,n] -> [m]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "row_sum")?;
        let data = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Tensor::new(vec![m], data)?, Op::RowSum(x))
    }

    /// Rescales every row to Euclidean length `radius`:
    /// `y = radius · x / sqrt(‖x‖² + eps)`.
    pub fn row_normalize(&mut self, x: Var, radius: f64, eps: f64) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "row_normalize")?;
        if !(radius > 0.0 && eps > 0.0) {
            return Err(Error::Contract(format!("row_normalize needs radius > 0 and eps > 0, got {radius} and {eps}")));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= radius / norm);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::RowNormalize { x, radius, eps })
    }

    /// Selects `x[i, idx[i]]` for every row: `[m,n] -> [m]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "pick")?;
        if idx.len() != m {
            return Err(Error::shape("pick", format!("{} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("index {bad} out of range for {n} columns")));
        }
        let t = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &c)| t[r * n + c]).collect();
        self.push(Tensor::new(vec![m], data)?, Op::Pick(x, idx.to_vec()))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of a node used several
    /// times accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[i];
            for (input, contribution) in self.local_grads(node, g) {
                contribution.check_finite(node.op.name())?;
                match &mut before[input.0] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of `node` for each input that needs a gradient.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).shape()[1];
                if wants(a) {
                    let d = mm_nt(gd, val(b).data(), m, n, k);
                    out.push((a, Tensor::new(vec![m, k], d).unwrap()));
                }
                if wants(b) {
                    let d = mm_tn(val(a).data(), gd, m, k, n);
                    out.push((b, Tensor::new(vec![k, n], d).unwrap()));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let n = val(b).shape()[0];
                if wants(a) {
                    let d = mm(gd, val(b).data(), m, n, k);
                    out.push((a, Tensor::new(vec![m, k], d).unwrap()));
                }
                if wants(b) {
                    let d = mm_tn(gd, val(a).data(), m, n, k);
                    out.push((b, Tensor::new(vec![n, k], d).unwrap()));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (r, c) = val(a).dims2().unwrap();
                    let d = transpose(gd, c, r);
                    out.push((a, Tensor::new(vec![r, c], d).unwrap()));
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(a), val(b));
                let at = |t: &Tensor, i: usize| if t.is_scalar() { t.item() } else { t.data()[i] };
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.is_scalar() && full.len() != 1 {
                        Tensor::new(t.shape().to_vec(), vec![full.iter().sum()]).unwrap()
                    } else {
                        Tensor::new(t.shape().to_vec(), full).unwrap()
                    }
                };
                if wants(a) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => {
                            gd.iter().enumerate().map(|(i, gv)| gv * at(tb, i)).collect()
                        }
                    };
                    out.push((a, reduce(ta, full)));
                }
                if wants(b) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add => gd.to_vec(),
                        BinaryKind::Sub => gd.iter().map(|gv| -gv).collect(),
                        BinaryKind::Mul => {
                            gd.iter().enumerate().map(|(i, gv)| gv * at(ta, i)).collect()
                        }
                    };
                    out.push((b, reduce(tb, full)));
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    out.push((a, g.map(|x| c * x)));
                }
            }
            Op::GradReversal(a, c) => {
                if wants(a) {
                    out.push((a, g.map(|x| -c * x)));
                }
            }
            Op::AddRow(x, b) => {
                if wants(x) {
                    out.push((x, g.clone()));
                }
                if wants(b) {
                    let n = val(b).len();
                    let mut d = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, Tensor::new(vec![n], d).unwrap()));
                }
            }
            Op::Act(kind, x) => {
                if wants(x) {
                    let (xin, y) = (val(x).data(), node.value.data());
                    let d: Vec<f64> = match kind {
                        Activation::Relu => {
                            gd.iter().zip(xin).map(|(gv, &z)| if z > 0.0 { *gv } else { 0.0 }).collect()
                        }
                        Activation::Tanh => gd.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                        Activation::Sigmoid => gd.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                    };
                    out.push((x, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
            }
            Op::Exp(x) => {
                if wants(x) {
                    let d = gd.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                    out.push((x, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
            }
            Op::LogSigmoid { x, floor } => {
                if wants(x) {
                    let lf = floor.ln();
                    let d = gd
                        .iter()
                        .zip(val(x).data())
                        .map(|(gv, &z)| if log_sigmoid(z) < lf { 0.0 } else { gv * sigmoid(-z) })
                        .collect();
                    out.push((x, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
            }
            Op::LogSoftmax(x) => {
                if wants(x) {
                    let c = g.shape()[1];
                    let mut d = vec![0.0; gd.len()];
                    for ((drow, grow), yrow) in
                        d.chunks_mut(c).zip(gd.chunks(c)).zip(node.value.data().chunks(c))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv = gv - yv.exp() * gsum;
                        }
                    }
                    out.push((x, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
            }
            Op::Outer(f, p) | Op::RowOuter(f, p) => {
                let (tf, tp) = (val(f), val(p));
                let (b, df, dp) = match tf.dims2() {
                    Some((b, df)) => (b, df, tp.shape()[1]),
                    None => (1, tf.len(), tp.len()),
                };
                if wants(f) {
                    let mut d = vec![0.0; b * df];
                    for r in 0..b {
                        let prow = &tp.data()[r * dp..(r + 1) * dp];
                        for i in 0..df {
                            let gs = &gd[(r * df + i) * dp..(r * df + i + 1) * dp];
                            d[r * df + i] = gs.iter().zip(prow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((f, Tensor::new(tf.shape().to_vec(), d).unwrap()));
                }
                if wants(p) {
                    let mut d = vec![0.0; b * dp];
                    for r in 0..b {
                        for i in 0..df {
                            let fv = tf.data()[r * df + i];
                            let gs = &gd[(r * df + i) * dp..(r * df + i + 1) * dp];
                            for (dv, gv) in d[r * dp..(r + 1) * dp].iter_mut().zip(gs) {
                                *dv += gv * fv;
                            }
                        }
                    }
                    out.push((p, Tensor::new(tp.shape().to_vec(), d).unwrap()));
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    out.push((x, Tensor::full(val(x).shape(), g.item())));
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let n = val(x).len() as f64;
                    out.push((x, Tensor::full(val(x).shape(), g.item() / n)));
                }
            }
            Op::RowSum(x) => {
                if wants(x) {
                    let (m, n) = val(x).dims2().unwrap();
                    let d = (0..m * n).map(|i| gd[i / n]).collect();
                    out.push((x, Tensor::new(vec![m, n], d).unwrap()));
                }
            }
            Op::RowNormalize { x, radius, eps } => {
                if wants(x) {
                    let (m, n) = val(x).dims2().unwrap();
                    let mut d = vec![0.0; m * n];
                    for ((xr, gr), dr) in val(x).data().chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, xv), gv) in dr.iter_mut().zip(xr).zip(gr) {
                            *dv = radius * (gv / norm - xv * xg / (norm * norm * norm));
                        }
                    }
                    out.push((x, Tensor::new(vec![m, n], d).unwrap()));
                }
            }
            Op::Pick(x, ref idx) => {
                if wants(x) {
                    let (m, n) = val(x).dims2().unwrap();
                    let mut d = vec![0.0; m * n];
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * n + c] = gd[r];
                    }
                    out.push((x, Tensor::new(vec![m, n], d).unwrap()));
                }
            }
        }
        out
    }
}
