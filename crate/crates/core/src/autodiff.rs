//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in execution order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and returns a [`Gradients`] table holding an entry for every node
//! that depends on a leaf created with `requires_grad = true`. Frozen leaves
//! never receive a gradient entry.
//!
//! The op vocabulary is deliberately fixed: elementwise add/sub/mul (with
//! scalar-only broadcasting), matmul, transpose, token conv1d, sigmoid, tanh,
//! relu, row softmax, log, sum, mean, row slicing/concat, reshape, weighted
//! row sampling (bilinear sampling, gathers) and row average pooling.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Log,
}

/// Kind selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Binary(BinaryOp),
    Unary(UnaryOp),
}

/// Sparse linear row map: output row `q` is `Σ w · input[p]` over `rows[q]`.
///
/// The input is viewed as `P × C` where `C` is its last extent. Bilinear
/// sampling, RoI Align and row gathers all reduce to this form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplePlan {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SamplePlan {
    /// Plan selecting the given rows verbatim.
    pub fn gather(indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies the plan to a `P × C` view of `input`, producing `Q × C`.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (p, c) = row_view(input)?;
        let mut out = vec![0.0; self.rows.len() * c];
        for (q, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[q * c..(q + 1) * c];
            for &(src, w) in taps {
                if src >= p {
                    return Err(Error::invalid(
                        "sample",
                        format!("row index {src} out of range for {p} rows"),
                    ));
                }
                let s = &input.data()[src * c..(src + 1) * c];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.rows.len(), c], out))
    }
}

/// Views a tensor as rows over its last axis.
fn row_view(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().split_last() {
        Some((&c, _)) if c > 0 => Ok((t.len() / c, c)),
        Some((&0, lead)) => Ok((lead.iter().product(), 0)),
        _ => Err(Error::invalid("row_view", "scalar has no rows")),
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnaryOp, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Var },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    AvgPoolRows(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Sample { x: Var, plan: Arc<SamplePlan> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn is_scalar(&self, v: Var) -> bool {
        self.value(v).shape().is_empty()
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Binary(op), Some(b)) => self.binary(op, a, b),
            (Elementwise::Unary(op), None) => self.unary(op, a),
            (Elementwise::Binary(_), None) => {
                Err(Error::invalid("elementwise", "binary op needs two operands"))
            }
            (Elementwise::Unary(_), Some(_)) => {
                Err(Error::invalid("elementwise", "unary op takes one operand"))
            }
        }
    }

    /// Elementwise binary op. Shapes must match exactly unless `b` is a
    /// rank-0 scalar, which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, "elementwise", f)?
        } else if tb.shape().is_empty() {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.requires_grad(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.requires_grad(a);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = match op {
            UnaryOp::Sigmoid => t.map(sigmoid),
            UnaryOp::Tanh => t.map(f64::tanh),
            UnaryOp::Relu => t.map(|x| x.max(0.0)),
            UnaryOp::Log => {
                if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::invalid("log", format!("non-positive input {bad}")));
                }
                t.map(f64::ln)
            }
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Convolution along the token axis with zero same-padding.
    ///
    /// `x: N×C_in`, `w: C_out×C_in×k` (k odd), `b: C_out` → `N×C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = conv1d_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv1d { x, w, b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = row_view(t)?;
        let mut out = t.data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Averages the rows of a `P × C` view into a `1 × C` row.
    pub fn avg_pool_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (p, c) = row_view(t)?;
        if p == 0 {
            return Err(Error::invalid("avg_pool", "no rows to pool"));
        }
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= p as f64);
        let value = Tensor::from_parts(vec![1, c], out);
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::AvgPoolRows(a), rg))
    }

    /// `[start, end)` along `axis` (0 = rows, 1 = columns) of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > extent {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let value = if axis == 0 {
            Tensor::from_parts(vec![end - start, c], t.data()[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
            }
            Tensor::from_parts(vec![r, w], out)
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Slice { x: a, axis, start }, rg))
    }

    /// Concatenates rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis > 1 {
            return Err(Error::invalid("concat", format!("axis {axis} on rank-2 inputs")));
        }
        let (_, c0) = self.value(first).dims2()?;
        let (r0, _) = self.value(first).dims2()?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            dims.push((r, c));
        }
        let value = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::from_parts(vec![rows, c0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::from_parts(vec![r0, cols], out)
        };
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Weighted row sampling; see [`SamplePlan`].
    pub fn sample(&mut self, a: Var, plan: Arc<SamplePlan>) -> Result<Var> {
        let value = plan.apply(self.value(a))?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Sample { x: a, plan }, rg))
    }

    /// Row gather, a [`SamplePlan::gather`] convenience.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.sample(a, Arc::new(SamplePlan::gather(indices)))
    }

    /// `x · w + 1 ⊗ b` for `x: N×I`, `w: I×O`, `b: 1×O`.
    ///
    /// The bias is spread over rows with an outer product against a ones
    /// column, keeping the op set free of general broadcasting.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let (n, _) = self.value(x).dims2()?;
                let ones = self.constant(Tensor::ones(vec![n, 1]));
                let spread = self.matmul(ones, b)?;
                self.add(y, spread)
            }
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            visited += 1;
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scalar_b = self.is_scalar(b) && ta.shape() != tb.shape();
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => {
                        if scalar_b {
                            let s = tb.data()[0];
                            (g.map(|v| v * s), g.zip_map(ta, "mul_grad", |gv, av| gv * av)?)
                        } else {
                            (
                                g.zip_map(tb, "mul_grad", |gv, bv| gv * bv)?,
                                g.zip_map(ta, "mul_grad", |gv, av| gv * av)?,
                            )
                        }
                    }
                };
                let gb = if scalar_b { Tensor::scalar(gb.sum()) } else { gb };
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::MulScalar(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::Unary(op, a) => {
                let x = self.value(a);
                let d = match op {
                    UnaryOp::Sigmoid => g.zip_map(y, "sigmoid_grad", |gv, yv| gv * yv * (1.0 - yv))?,
                    UnaryOp::Tanh => g.zip_map(y, "tanh_grad", |gv, yv| gv * (1.0 - yv * yv))?,
                    UnaryOp::Relu => g.zip_map(x, "relu_grad", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                    UnaryOp::Log => g.zip_map(x, "log_grad", |gv, xv| gv / xv)?,
                };
                self.accumulate(grads, a, d);
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.dims2()?;
                let (_, p) = tb.dims2()?;
                if self.requires_grad(a) {
                    // dA = G · Bᵀ
                    let bt = tb.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, p, k);
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · G
                    let at = ta.transpose()?;
                    let mut db = vec![0.0; k * p];
                    matmul_into(at.data(), g.data(), &mut db, k, m, p);
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, p], db));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            &Op::Conv1d { x, w, b } => {
                let (dx, dw, db) = conv1d_backward(self.value(x), self.value(w), g)?;
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                self.accumulate(grads, b, db);
            }
            &Op::Softmax(a) => {
                let (_, c) = row_view(y)?;
                let mut d = vec![0.0; y.len()];
                if c > 0 {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            &Op::Sum(a) => {
                let gv = g.data()[0];
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(shape, gv));
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                let gv = g.data()[0] / t.len() as f64;
                self.accumulate(grads, a, Tensor::full(t.shape().to_vec(), gv));
            }
            &Op::AvgPoolRows(a) => {
                let t = self.value(a);
                let (p, c) = row_view(t)?;
                let scaled: Vec<f64> = g.data().iter().map(|v| v / p as f64).collect();
                let mut d = Vec::with_capacity(t.len());
                for _ in 0..p {
                    d.extend_from_slice(&scaled[..c]);
                }
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), d));
            }
            &Op::Slice { x, axis, start } => {
                let (r, c) = self.value(x).dims2()?;
                let (gr, gc) = g.dims2()?;
                let mut d = vec![0.0; r * c];
                if axis == 0 {
                    d[start * c..(start + gr) * c].copy_from_slice(g.data());
                } else {
                    for i in 0..r {
                        d[i * c + start..i * c + start + gc].copy_from_slice(g.row(i));
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], d));
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    let piece = if *axis == 0 {
                        let cols = g.dims2()?.1;
                        Tensor::from_parts(vec![r, c], g.data()[offset * cols..(offset + r) * cols].to_vec())
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        Tensor::from_parts(vec![r, c], d)
                    };
                    offset += if *axis == 0 { r } else { c };
                    self.accumulate(grads, p, piece);
                }
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, g.reshape(shape)?);
            }
            Op::Sample { x, plan } => {
                let t = self.value(*x);
                let (_, c) = row_view(t)?;
                let mut d = vec![0.0; t.len()];
                for (q, taps) in plan.rows.iter().enumerate() {
                    let gr = &g.data()[q * c..(q + 1) * c];
                    for &(src, w) in taps {
                        for (dv, gv) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                            *dv += w * gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(t.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for frozen leaves and
    /// nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of tape nodes processed during the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv1d_check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, cin) = x.dims2()?;
    let (cout, wcin, k) = w.dims3()?;
    if k % 2 == 0 {
        return Err(Error::invalid(
            "conv1d",
            format!("kernel size {k} must be odd for same padding"),
        ));
    }
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv1d bias",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((n, cin, cout, k))
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin, cout, k) = conv1d_check(x, w, b)?;
    let half = (k / 2) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout];
    for t in 0..n {
        let dst = &mut out[t * cout..(t + 1) * cout];
        dst.copy_from_slice(b.data());
        for j in 0..k {
            let src = t as isize + j as isize - half;
            if src < 0 || src >= n as isize {
                continue;
            }
            let xr = &xd[src as usize * cin..(src as usize + 1) * cin];
            for (o, d) in dst.iter_mut().enumerate() {
                let base = o * cin * k;
                let mut acc = 0.0;
                for (c, &xv) in xr.iter().enumerate() {
                    acc += wd[base + c * k + j] * xv;
                }
                *d += acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout], out))
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cin) = x.dims2()?;
    let (cout, _, k) = w.dims3()?;
    let half = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; n * cin];
    let mut dw = vec![0.0; cout * cin * k];
    let mut db = vec![0.0; cout];
    for t in 0..n {
        let gr = &gd[t * cout..(t + 1) * cout];
        for (o, &gv) in gr.iter().enumerate() {
            db[o] += gv;
        }
        for j in 0..k {
            let src = t as isize + j as isize - half;
            if src < 0 || src >= n as isize {
                continue;
            }
            let s = src as usize;
            for (o, &gv) in gr.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let base = o * cin * k;
                for c in 0..cin {
                    dx[s * cin + c] += wd[base + c * k + j] * gv;
                    dw[base + c * k + j] += xd[s * cin + c] * gv;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, cin], dx),
        Tensor::from_parts(vec![cout, cin, k], dw),
        Tensor::from_parts(vec![cout], db),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sigmoid_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.param(Tensor::scalar(2.0));
        let m = tape.mul(a, s).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
        let one = tape.constant(t(&[1], &[1.0]));
        assert!(tape.add(a, one).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -1.0, 7.0]));
        let l = tape.sum(x);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::eye(2));
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_some());
        assert!(g.get(x).is_none());
    }

    #[test]
    fn each_node_visited_once() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.visited(), 4);
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![4, 2]));
        let w = tape.constant(Tensor::zeros(vec![3, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.conv1d(x, w, b).is_err());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(vec![5, 3], |i| i as f64 - 4.0);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::eye(3).reshape(vec![3, 3, 1]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv1d_constant_input_with_padding() {
        // Interior tokens see three taps over every input channel; the end
        // tokens lose one tap to zero padding.
        let (n, cin, c, bias) = (6, 2, 1.5, 0.25);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![n, cin], c));
        let w = tape.constant(Tensor::ones(vec![1, cin, 3]));
        let b = tape.constant(Tensor::full(vec![1], bias));
        let y = tape.conv1d(x, w, b).unwrap();
        let out = tape.value(y).data().to_vec();
        for v in &out[1..n - 1] {
            assert_eq!(*v, 3.0 * cin as f64 * c + bias);
        }
        assert_eq!(out[0], 2.0 * cin as f64 * c + bias);
        assert_eq!(out[n - 1], 2.0 * cin as f64 * c + bias);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -500.0, 0.0, 500.0]));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn slice_concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64));
        let s = tape.slice(a, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        let e = tape.constant(Tensor::zeros(vec![0, 4]));
        let c = tape.concat(&[a, e, a], 0).unwrap();
        assert_eq!(tape.shape(c), &[6, 4]);
        assert!(tape.concat(&[a, s], 0).is_err());
    }
}
