//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated (values are computed
//! eagerly), so building an expression *is* the forward pass. [`Tape::backward`]
//! then sweeps the records once in reverse, accumulating adjoints into a private
//! buffer; the tape itself is never mutated by a sweep, so several sweeps over
//! one tape may run concurrently.
//!
//! Nodes that do not depend on any gradient-carrying leaf are marked constant at
//! construction and are skipped by the reverse sweep. [`Tape::stop_gradient`]
//! produces such a constant from any node while keeping its value.

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction direction. `Rows` collapses the row dimension (r×c → 1×c),
/// `Cols` collapses the column dimension (r×c → r×1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var),
    Broadcast(Var),
    ConcatCols(Vec<Var>),
    Slice { src: Var, r0: usize, c0: usize },
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Cholesky(Var),
    TriSolve { l: Var, b: Var, transpose: bool },
    LogSumExp(Var),
    StopGradient,
    ClampMin(Var, f64),
    Diag(Var),
    Tril(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of one reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable from the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.adjoints.get(v.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Overflow-safe log-sum-exp of a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn lse_axis(x: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = x.shape();
    match axis {
        Axis::Cols => Tensor::from_vec(r, 1, (0..r).map(|i| log_sum_exp(x.row(i))).collect()),
        Axis::Rows => {
            let t = x.transpose();
            Tensor::from_vec(1, c, (0..c).map(|j| log_sum_exp(t.row(j))).collect())
        }
    }
}

fn sum_axis(x: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = x.shape();
    match axis {
        Axis::Cols => Tensor::from_vec(r, 1, (0..r).map(|i| x.row(i).iter().sum()).collect()),
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Tensor::from_vec(1, c, out)
        }
    }
}

/// Expands `x` (1×1, 1×c or r×1) to r×c.
fn broadcast_to(x: &Tensor, rows: usize, cols: usize) -> Tensor {
    match x.shape() {
        (1, 1) => Tensor::full(rows, cols, x.item()),
        (1, c) if c == cols => {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                data.extend_from_slice(x.data());
            }
            Tensor::from_vec(rows, cols, data)
        }
        (r, 1) if r == rows => {
            let mut data = Vec::with_capacity(rows * cols);
            for &v in x.data() {
                data.extend(std::iter::repeat_n(v, cols));
            }
            Tensor::from_vec(rows, cols, data)
        }
        s => panic!("cannot broadcast {s:?} to ({rows}, {cols})"),
    }
}

/// Adjoint of a broadcast: sum `g` back down to `shape`.
fn unbroadcast(g: &Tensor, shape: (usize, usize)) -> Tensor {
    match shape {
        s if s == g.shape() => g.clone(),
        (1, 1) => Tensor::scalar(g.sum()),
        (1, _) => sum_axis(g, Axis::Rows),
        (_, 1) => sum_axis(g, Axis::Cols),
        s => panic!("cannot unbroadcast {:?} to {s:?}", g.shape()),
    }
}

/// Lower triangle with the diagonal halved.
fn phi(x: &Tensor) -> Tensor {
    let mut out = x.tril();
    for i in 0..out.rows() {
        let v = out.get(i, i);
        out.set(i, i, 0.5 * v);
    }
    out
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

    fn push(&mut self, op: Op, value: Tensor, grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.g(v)
    }

    /// Values of the requested nodes.
    pub fn forward(&self, outputs: &[Var]) -> Vec<Tensor> {
        outputs.iter().map(|&v| self.value(v).clone()).collect()
    }

    /// Trainable leaf: the reverse sweep reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(Op::Leaf, value, trainable)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let grad = self.g(a) || self.g(b);
        self.push(Op::Add(a, b), v, grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let grad = self.g(a) || self.g(b);
        self.push(Op::Sub(a, b), v, grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let grad = self.g(a) || self.g(b);
        self.push(Op::Mul(a, b), v, grad)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let grad = self.g(a) || self.g(b);
        self.push(Op::Div(a, b), v, grad)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scaled(c);
        let grad = self.g(a);
        self.push(Op::Scale(a, c), v, grad)
    }

    /// a + c elementwise for a constant c.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let grad = self.g(a);
        self.push(Op::Offset(a), v, grad)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), false);
        let grad = self.g(a) || self.g(b);
        self.push(Op::MatMul(a, b), v, grad)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let grad = self.g(a);
        self.push(Op::Transpose(a), v, grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let grad = self.g(a);
        self.push(op, v, grad)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// max(a, c) elementwise; the gradient passes only where a > c.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMin(a, c), |x| x.max(c))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let grad = self.g(a);
        self.push(Op::Sum(a), v, grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let v = sum_axis(self.value(a), axis);
        let grad = self.g(a);
        self.push(Op::SumAxis(a), v, grad)
    }

    /// Expands a 1×1, 1×c or r×1 node to rows×cols.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = broadcast_to(self.value(a), rows, cols);
        let grad = self.g(a);
        self.push(Op::Broadcast(a), v, grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let v = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs)
        };
        let grad = parts.iter().any(|&p| self.g(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, grad)
    }

    /// Rectangular block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, nr: usize, nc: usize) -> Var {
        let v = self.value(a).slice(r0, c0, nr, nc);
        let grad = self.g(a);
        self.push(Op::Slice { src: a, r0, c0 }, v, grad)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, nc: usize) -> Var {
        let r = self.shape(a).0;
        self.slice(a, 0, c0, r, nc)
    }

    /// Output row i is input row `index[i]`; repeated indices accumulate on the way back.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let v = self.value(a).gather_rows(index);
        let grad = self.g(a);
        self.push(Op::GatherRows(a, index.to_vec()), v, grad)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshape(rows, cols);
        let grad = self.g(a);
        self.push(Op::Reshape(a), v, grad)
    }

    /// Lower Cholesky factor of the symmetric part of `a`. No jitter is added.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let v = tensor::cholesky(self.value(a))?;
        let grad = self.g(a);
        Ok(self.push(Op::Cholesky(a), v, grad))
    }

    /// X with L X = B, or Lᵀ X = B when `transpose`. Only the lower triangle of L is read.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Var {
        let v = tensor::tri_solve(self.value(l), self.value(b), transpose);
        let grad = self.g(l) || self.g(b);
        self.push(Op::TriSolve { l, b, transpose }, v, grad)
    }

    pub fn log_sum_exp(&mut self, a: Var, axis: Axis) -> Var {
        let v = lse_axis(self.value(a), axis);
        let grad = self.g(a);
        self.push(Op::LogSumExp(a), v, grad)
    }

    /// Same value; the reverse sweep propagates nothing through this edge.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Op::StopGradient, v, false)
    }

    /// Diagonal of a square node as an n×1 column.
    pub fn diag(&mut self, a: Var) -> Var {
        let d = self.value(a).diag();
        let v = Tensor::from_vec(d.len(), 1, d);
        let grad = self.g(a);
        self.push(Op::Diag(a), v, grad)
    }

    pub fn tril(&mut self, a: Var) -> Var {
        let v = self.value(a).tril();
        let grad = self.g(a);
        self.push(Op::Tril(a), v, grad)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::Shape(format!("backward needs a 1x1 output, got {shape:?}")));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj, shapes: self.nodes[..n].iter().map(|nd| nd.value.shape()).collect() })
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::Add(a, b) => {
                if self.g(a) {
                    accumulate(adj, a, g.clone());
                }
                if self.g(b) {
                    accumulate(adj, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.g(a) {
                    accumulate(adj, a, g.clone());
                }
                if self.g(b) {
                    accumulate(adj, b, g.scaled(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if self.g(a) {
                    accumulate(adj, a, g.zip_map(self.value(b), |u, v| u * v));
                }
                if self.g(b) {
                    accumulate(adj, b, g.zip_map(self.value(a), |u, v| u * v));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.g(a) {
                    accumulate(adj, a, g.zip_map(bv, |u, v| u / v));
                }
                if self.g(b) {
                    // d(a/b)/db = -y/b
                    let t = g.zip_map(y, |u, yv| u * yv).zip_map(bv, |u, v| -u / v);
                    accumulate(adj, b, t);
                }
            }
            &Op::Scale(a, c) => accumulate(adj, a, g.scaled(c)),
            &Op::Offset(a) => accumulate(adj, a, g.clone()),
            &Op::MatMul(a, b) => {
                if self.g(a) {
                    accumulate(adj, a, gemm(g, false, self.value(b), true));
                }
                if self.g(b) {
                    accumulate(adj, b, gemm(self.value(a), true, g, false));
                }
            }
            &Op::Transpose(a) => accumulate(adj, a, g.transpose()),
            &Op::Exp(a) => accumulate(adj, a, g.zip_map(y, |u, v| u * v)),
            &Op::Log(a) => accumulate(adj, a, g.zip_map(self.value(a), |u, v| u / v)),
            &Op::Tanh(a) => accumulate(adj, a, g.zip_map(y, |u, v| u * (1.0 - v * v))),
            &Op::Softplus(a) => accumulate(adj, a, g.zip_map(self.value(a), |u, v| u * sigmoid(v))),
            &Op::Square(a) => accumulate(adj, a, g.zip_map(self.value(a), |u, v| 2.0 * u * v)),
            &Op::Sqrt(a) => {
                // A zero root contributes nothing rather than an infinite slope.
                accumulate(adj, a, g.zip_map(y, |u, v| if v > 0.0 { u / (2.0 * v) } else { 0.0 }))
            }
            &Op::ClampMin(a, c) => accumulate(adj, a, g.zip_map(self.value(a), |u, v| if v > c { u } else { 0.0 })),
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                accumulate(adj, a, Tensor::full(r, c, g.item()));
            }
            &Op::SumAxis(a) => {
                let (r, c) = self.shape(a);
                accumulate(adj, a, broadcast_to(g, r, c));
            }
            &Op::Broadcast(a) => accumulate(adj, a, unbroadcast(g, self.shape(a))),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.g(p) {
                        accumulate(adj, p, g.slice(0, c0, r, c));
                    }
                    c0 += c;
                }
            }
            &Op::Slice { src, r0, c0 } => {
                let (r, c) = self.shape(src);
                let mut t = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        t.set(r0 + i, c0 + j, g.get(i, j));
                    }
                }
                accumulate(adj, src, t);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    let row = g.row(i);
                    let dst = &mut t.data_mut()[src * c..(src + 1) * c];
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(adj, *a, t);
            }
            &Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                accumulate(adj, a, g.reshape(r, c));
            }
            &Op::Cholesky(a) => {
                // A = L Lᵀ: Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), with Φ = lower triangle, halved diagonal.
                let l = y;
                let p = phi(&gemm(l, true, &g.tril(), false));
                let s = tensor::tri_solve(l, &p, true);
                let s = tensor::tri_solve(l, &s.transpose(), true).transpose();
                let sym = s.zip_map(&s.transpose(), |u, v| 0.5 * (u + v));
                accumulate(adj, a, sym);
            }
            &Op::TriSolve { l, b, transpose } => {
                let lv = self.value(l);
                // X̄ back-propagates as B̄ = L⁻ᵀ X̄ (or L⁻¹ X̄ for the transposed solve).
                let gb = tensor::tri_solve(lv, g, !transpose);
                if self.g(l) {
                    let gl = if transpose {
                        gemm(y, false, &gb, true).scaled(-1.0).tril()
                    } else {
                        gemm(&gb, false, y, true).scaled(-1.0).tril()
                    };
                    accumulate(adj, l, gl);
                }
                if self.g(b) {
                    accumulate(adj, b, gb);
                }
            }
            &Op::LogSumExp(a) => {
                let x = self.value(a);
                let (r, c) = x.shape();
                let yb = broadcast_to(y, r, c);
                let gb = broadcast_to(g, r, c);
                let mut t = Tensor::zeros(r, c);
                for ((o, (&xv, &yv)), &gv) in t.data_mut().iter_mut().zip(x.data().iter().zip(yb.data())).zip(gb.data())
                {
                    *o = gv * (xv - yv).exp();
                }
                accumulate(adj, a, t);
            }
            &Op::Diag(a) => {
                let (r, c) = self.shape(a);
                let mut t = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    t.set(i, i, g.get(i, 0));
                }
                accumulate(adj, a, t);
            }
            &Op::Tril(a) => accumulate(adj, a, g.tril()),
        }
    }
}
