//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert list: every primitive appends one node holding
//! its output value and, when any input is tracked, the operation that made
//! it. [`Graph::backward`] walks the list once in reverse and accumulates
//! vector-Jacobian products into the tracked nodes.
//!
//! Broadcasting is deliberately narrow. Binary operations accept a right
//! operand that is either the same shape as the left one, a single element,
//! an `[n, 1]` column against an `[n, d]` left operand, or a `[1, d]` row
//! against an `[n, d]` left operand. Nothing else is broadcast.
//!
//! ```
//! use smix::autodiff::Graph;
//! use smix::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp {
    Neg,
    Square,
    Sqrt,
    Log,
    Exp,
    Cos,
    Sin,
    Sigmoid,
    Softplus,
    Silu,
    LeakyRelu(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Bcast),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnOp, Var),
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowSqNorm(Var),
    RowL1(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// The tape. One graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(loss)/d(var). Nodes the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnOp {
    fn name(self) -> &'static str {
        match self {
            UnOp::Neg => "neg",
            UnOp::Square => "square",
            UnOp::Sqrt => "sqrt",
            UnOp::Log => "log",
            UnOp::Exp => "exp",
            UnOp::Cos => "cos",
            UnOp::Sin => "sin",
            UnOp::Sigmoid => "sigmoid",
            UnOp::Softplus => "softplus",
            UnOp::Silu => "silu",
            UnOp::LeakyRelu(_) => "leaky_relu",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnOp::Neg => -x,
            UnOp::Square => x * x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Log => x.ln(),
            UnOp::Exp => x.exp(),
            UnOp::Cos => x.cos(),
            UnOp::Sin => x.sin(),
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Softplus => softplus(x),
            UnOp::Silu => x * sigmoid(x),
            UnOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnOp::Neg => -1.0,
            UnOp::Square => 2.0 * x,
            UnOp::Sqrt => 0.5 / y,
            UnOp::Log => 1.0 / x,
            UnOp::Exp => y,
            UnOp::Cos => -x.sin(),
            UnOp::Sin => x.cos(),
            UnOp::Sigmoid => y * (1.0 - y),
            UnOp::Softplus => sigmoid(x),
            UnOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, optionally transposing
/// either operand via strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the m x k, k x n and m x n extents walked
    // with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations, excluding leaves.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Same value as `v`, cut off from the tape.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        check_finite("matmul", &out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    fn bcast(&self, op: BinOp, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let nb = self.value(b).numel();
        if sa == sb {
            Ok(Bcast::Same)
        } else if nb == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb == [sa[0], 1] {
            Ok(Bcast::Col)
        } else if sa.len() == 2 && (sb == [1, sa[1]] || sb == [sa[1]]) {
            Ok(Bcast::Row)
        } else {
            Err(Error::Shape(format!("{} {sa:?} with {sb:?}", op.name())))
        }
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if op == BinOp::Div && bv.data().contains(&0.0) {
            return Err(Error::contract("division by a zero element"));
        }
        let cols = av.cols();
        let ad = av.data();
        let bd = bv.data();
        let out: Vec<f64> = match (op, mode) {
            (BinOp::Add, _) => broadcast_map(ad, bd, mode, cols, |x, y| x + y),
            (BinOp::Sub, _) => broadcast_map(ad, bd, mode, cols, |x, y| x - y),
            (BinOp::Mul, _) => broadcast_map(ad, bd, mode, cols, |x, y| x * y),
            (BinOp::Div, _) => broadcast_map(ad, bd, mode, cols, |x, y| x / y),
        };
        check_finite(op.name(), &out)?;
        let shape = av.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b, mode), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        check_finite("add_scalar", out.data())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::AddScalar(a), tracked))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        check_finite("mul_scalar", out.data())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::MulScalar(a, c), tracked))
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var> {
        let out = match op {
            UnOp::Silu => self.value(a).map(|x| x * sigmoid(x)),
            _ => self.value(a).map(|x| op.apply(x)),
        };
        check_finite(op.name(), out.data())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Unary(op, a), tracked))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sqrt, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Cos, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sin, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Softplus, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Silu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(UnOp::LeakyRelu(slope), a)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::contract("concat needs at least one part and axis 0 or 1"));
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(Error::Shape(format!("concat of non-matrices {shapes:?}")));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(Error::Shape(format!("concat axis {axis} of {shapes:?}")));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out = if axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![total, shapes[0][1]], data)?
        } else {
            let rows = shapes[0][0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[s])?;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        check_finite("mean", &[s])?;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), tracked))
    }

    fn per_row(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::Shape(format!("{name} on shape {:?}", v.shape())));
        }
        let out: Vec<f64> = (0..v.rows()).map(|r| f(v.row(r))).collect();
        check_finite(name, &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::column(out), op, tracked))
    }

    /// Row sums: `[n, d] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.per_row(a, "sum_cols", Op::SumCols(a), |r| r.iter().sum())
    }

    /// Squared Euclidean norm of each row: `[n, d] -> [n, 1]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        self.per_row(a, "row_sq_norm", Op::RowSqNorm(a), |r| {
            r.iter().map(|x| x * x).sum()
        })
    }

    /// L1 norm of each row: `[n, d] -> [n, 1]`. The derivative uses
    /// `sign(0) = 0`.
    pub fn row_l1_norm(&mut self, a: Var) -> Result<Var> {
        self.per_row(a, "row_l1_norm", Op::RowL1(a), |r| {
            r.iter().map(|x| x.abs()).sum()
        })
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        gemm(m, n, k, gout, false, bv.data(), true, ga, true)
                    });
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        gemm(k, m, n, av.data(), true, gout, false, gb, true)
                    });
                }
            }
            Op::Binary(op, a, b, mode) => self.propagate_binary(*op, *a, *b, *mode, gout, grads),
            Op::AddScalar(a) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], gout.len(), |ga| {
                        ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += o)
                    });
                }
            }
            Op::MulScalar(a, c) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], gout.len(), |ga| {
                        ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += c * o)
                    });
                }
            }
            Op::Unary(op, a) => {
                if self.tracked(*a) {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], gout.len(), |ga| match op {
                        // sigmoid recovered from the stored output
                        UnOp::Silu => {
                            for i in 0..ga.len() {
                                let s = if x[i].abs() > 1e-100 { y[i] / x[i] } else { 0.5 };
                                ga[i] += gout[i] * s * (1.0 + x[i] * (1.0 - s));
                            }
                        }
                        _ => {
                            for i in 0..ga.len() {
                                ga[i] += gout[i] * op.derivative(x[i], y[i]);
                            }
                        }
                    });
                }
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    if self.tracked(p) {
                        accumulate(&mut grads[p.0], len, |gp| {
                            if *axis == 0 {
                                gp.iter_mut()
                                    .zip(&gout[offset..offset + len])
                                    .for_each(|(g, &o)| *g += o);
                            } else {
                                let pc = pv.cols();
                                for r in 0..pv.rows() {
                                    let src = &gout[r * total_cols + offset..r * total_cols + offset + pc];
                                    gp[r * pc..(r + 1) * pc]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(g, &o)| *g += o);
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { len } else { pv.cols() };
                }
            }
            Op::Sum(a) => {
                if self.tracked(*a) {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|g| *g += gout[0]));
                }
            }
            Op::Mean(a) => {
                if self.tracked(*a) {
                    let n = self.value(*a).numel();
                    let s = gout[0] / n as f64;
                    accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|g| *g += s));
                }
            }
            Op::SumCols(a) | Op::RowSqNorm(a) | Op::RowL1(a) => {
                if self.tracked(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let x = av.data();
                    let op = node.op.clone();
                    accumulate(&mut grads[a.0], x.len(), |ga| {
                        for (i, g) in ga.iter_mut().enumerate() {
                            let o = gout[i / c];
                            *g += match op {
                                Op::SumCols(_) => o,
                                Op::RowSqNorm(_) => 2.0 * x[i] * o,
                                _ => {
                                    let s = if x[i] > 0.0 {
                                        1.0
                                    } else if x[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    };
                                    s * o
                                }
                            };
                        }
                    });
                }
            }
        }
    }

    fn propagate_binary(
        &self,
        op: BinOp,
        a: Var,
        b: Var,
        mode: Bcast,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        let cols = av.cols();
        let x = av.data();
        let y = bv.data();
        if self.tracked(a) {
            accumulate(&mut grads[a.0], x.len(), |ga| match op {
                BinOp::Add => ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += o),
                BinOp::Sub => ga.iter_mut().zip(gout).for_each(|(g, &o)| *g += o),
                BinOp::Mul => broadcast_zip(ga, gout, y, mode, cols, |g, o, yb| *g += o * yb),
                BinOp::Div => broadcast_zip(ga, gout, y, mode, cols, |g, o, yb| *g += o / yb),
            });
        }
        if self.tracked(b) {
            accumulate(&mut grads[b.0], y.len(), |gb| {
                reduce_into(gb, gout, x, y, mode, cols, |o, xi, yb| match op {
                    BinOp::Add => o,
                    BinOp::Sub => -o,
                    BinOp::Mul => o * xi,
                    BinOp::Div => -o * xi / (yb * yb),
                })
            });
        }
    }
}

/// Elementwise `f(a, b)` with `b` broadcast according to `mode`.
fn broadcast_map(a: &[f64], b: &[f64], mode: Bcast, cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Row => {
            let mut out = Vec::with_capacity(a.len());
            for row in a.chunks_exact(cols) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        Bcast::Col => {
            let mut out = Vec::with_capacity(a.len());
            for (row, &y) in a.chunks_exact(cols).zip(b) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
            out
        }
    }
}

/// Visits `(g[i], gout[i], b[bcast(i)])` for every element of the left operand.
fn broadcast_zip(g: &mut [f64], gout: &[f64], b: &[f64], mode: Bcast, cols: usize, f: impl Fn(&mut f64, f64, f64)) {
    match mode {
        Bcast::Same => g.iter_mut().zip(gout).zip(b).for_each(|((g, &o), &y)| f(g, o, y)),
        Bcast::Scalar => g.iter_mut().zip(gout).for_each(|(g, &o)| f(g, o, b[0])),
        Bcast::Row => {
            for (gr, or) in g.chunks_exact_mut(cols).zip(gout.chunks_exact(cols)) {
                gr.iter_mut().zip(or).zip(b).for_each(|((g, &o), &y)| f(g, o, y));
            }
        }
        Bcast::Col => {
            for ((gr, or), &y) in g.chunks_exact_mut(cols).zip(gout.chunks_exact(cols)).zip(b) {
                gr.iter_mut().zip(or).for_each(|(g, &o)| f(g, o, y));
            }
        }
    }
}

/// Accumulates `f(gout[i], a[i], b[bcast(i)])` into the broadcast slot of `b`.
fn reduce_into(gb: &mut [f64], gout: &[f64], a: &[f64], b: &[f64], mode: Bcast, cols: usize, f: impl Fn(f64, f64, f64) -> f64) {
    match mode {
        Bcast::Same => {
            for i in 0..gb.len() {
                gb[i] += f(gout[i], a[i], b[i]);
            }
        }
        Bcast::Scalar => gb[0] += gout.iter().zip(a).map(|(&o, &x)| f(o, x, b[0])).sum::<f64>(),
        Bcast::Row => {
            for (or, ar) in gout.chunks_exact(cols).zip(a.chunks_exact(cols)) {
                for j in 0..cols {
                    gb[j] += f(or[j], ar[j], b[j]);
                }
            }
        }
        Bcast::Col => {
            for ((g, (or, ar)), &y) in gb.iter_mut().zip(gout.chunks_exact(cols).zip(a.chunks_exact(cols))).zip(b) {
                *g += or.iter().zip(ar).map(|(&o, &x)| f(o, x, y)).sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn scalar_of(g: &mut Graph, f: impl Fn(&mut Graph, Var) -> Result<Var>, x: Var) -> Var {
        let y = f(g, x).unwrap();
        g.sum(y).unwrap()
    }

    #[test]
    fn trivial_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let sp = g.softplus(z).unwrap();
        assert!((g.value(sp).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-16);
        let si = g.silu(z).unwrap();
        assert_eq!(g.value(si).item().unwrap(), 0.0);
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(sg).item().unwrap(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a_t = Tensor::matrix(3, 2, vec![1.5, -2., 3., 4., 5.25, 6.]).unwrap();
        let a = g.constant(a_t.clone());
        let p = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(p), &a_t);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[1., 2., 3.]));
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn softplus_of_product_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let x = g.constant(Tensor::scalar(1.0));
        let wx = g.mul(w, x).unwrap();
        let l = g.softplus(wx).unwrap();
        assert_eq!(g.backward(l).unwrap().get(w).data(), &[0.5]);
    }

    #[test]
    fn stop_gradient_freezes_factor() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let frozen = g.stop_gradient(x);
        assert_eq!(g.value(frozen), g.value(x));
        let y = g.mul(frozen, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).data(), &[3.0]);
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[1., 2.]));
        let unused = g.param(vec_t(&[5., 6., 7.]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0., 0., 0.]);
        assert!(!grads.is_reached(unused));
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
        assert!(matches!(g.div(a, b), Err(Error::Contract(_))));
        let neg = g.constant(vec_t(&[-1.0]));
        assert!(matches!(g.log(neg), Err(Error::NonFinite("log"))));
        let big = g.constant(vec_t(&[1000.0]));
        assert!(matches!(g.exp(big), Err(Error::NonFinite("exp"))));
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
        assert!(Graph::new().backward(Var(0)).is_err());
    }

    #[test]
    fn softplus_is_stable_in_tails() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[-800.0, 800.0]));
        let y = g.softplus(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        assert_eq!(g.value(y).data()[1], 800.0);
    }

    type UnaryFn = fn(&mut Graph, Var) -> Result<Var>;

    /// Every primitive's backward agrees with central differences at 20
    /// random points.
    #[test]
    fn unary_primitives_match_finite_differences() {
        let cases: Vec<(&str, UnaryFn, f64, f64)> = vec![
            ("neg", |g, x| g.neg(x), -2.0, 2.0),
            ("square", |g, x| g.square(x), -2.0, 2.0),
            ("sqrt", |g, x| g.sqrt(x), 0.2, 3.0),
            ("log", |g, x| g.log(x), 0.2, 3.0),
            ("exp", |g, x| g.exp(x), -2.0, 2.0),
            ("cos", |g, x| g.cos(x), -3.0, 3.0),
            ("sin", |g, x| g.sin(x), -3.0, 3.0),
            ("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
            ("softplus", |g, x| g.softplus(x), -4.0, 4.0),
            ("silu", |g, x| g.silu(x), -4.0, 4.0),
            ("leaky_relu", |g, x| g.leaky_relu(x, 0.01), -2.0, 2.0),
            ("mul_scalar", |g, x| g.mul_scalar(x, -1.7), -2.0, 2.0),
            ("add_scalar", |g, x| {
                let y = g.add_scalar(x, 0.3)?;
                g.square(y)
            }, -2.0, 2.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, f, lo, hi) in cases {
            let pts: Vec<f64> = (0..20)
                .map(|_| {
                    let v: f64 = rng.random_range(lo..hi);
                    // keep away from the kink of leaky_relu
                    if v.abs() < 1e-3 { 0.5 } else { v }
                })
                .collect();
            let mut g = Graph::new();
            let x = g.param(vec_t(&pts));
            let loss = scalar_of(&mut g, f, x);
            let analytic = g.backward(loss).unwrap().get(x);
            let numeric = finite_diff_grad(
                |p| {
                    let mut g = Graph::new();
                    let x = g.constant(vec_t(p));
                    let l = scalar_of(&mut g, f, x);
                    Ok(g.value(l).item()?)
                },
                &pts,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-6, "{name}: analytic {a} numeric {n}");
            }
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Binary, broadcast, reduction and structural primitives through a
    /// random smooth readout so the upstream gradient is not constant.
    #[test]
    fn structural_primitives_match_finite_differences() {
        type BinFn = fn(&mut Graph, Var, Var) -> Result<Var>;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: Vec<(&str, BinFn, [usize; 2], [usize; 2])> = vec![
            ("matmul", |g, a, b| g.matmul(a, b), [4, 3], [3, 5]),
            ("add", |g, a, b| g.add(a, b), [4, 3], [4, 3]),
            ("sub_row", |g, a, b| g.sub(a, b), [4, 3], [1, 3]),
            ("mul_col", |g, a, b| g.mul(a, b), [4, 3], [4, 1]),
            ("mul_scalar_var", |g, a, b| g.mul(a, b), [4, 3], [1, 1]),
            ("div", |g, a, b| {
                let b2 = g.square(b)?;
                let b3 = g.add_scalar(b2, 0.5)?;
                g.div(a, b3)
            }, [4, 3], [4, 3]),
            ("concat0", |g, a, b| g.concat(&[a, b], 0), [2, 3], [4, 3]),
            ("concat1", |g, a, b| g.concat(&[a, b], 1), [4, 3], [4, 2]),
            ("row_sq_norm", |g, a, b| {
                let s = g.add(a, b)?;
                g.row_sq_norm(s)
            }, [4, 3], [4, 3]),
            ("row_l1_norm", |g, a, b| {
                let s = g.mul(a, b)?;
                g.row_l1_norm(s)
            }, [4, 3], [4, 3]),
            ("sum_cols", |g, a, b| {
                let s = g.mul(a, b)?;
                g.sum_cols(s)
            }, [4, 3], [4, 3]),
            ("mean", |g, a, b| {
                let s = g.mul(a, b)?;
                let m = g.mean(s)?;
                g.mul(a, m)
            }, [4, 3], [4, 3]),
        ];
        for (name, f, sa, sb) in cases {
            for _ in 0..3 {
                let a0 = random_matrix(&mut rng, sa[0], sa[1]);
                let b0 = random_matrix(&mut rng, sb[0], sb[1]);
                let eval = |a: Tensor, b: Tensor, track: bool| -> (Graph, Var, Var, Var) {
                    let mut g = Graph::new();
                    let (a, b) = if track {
                        (g.param(a), g.param(b))
                    } else {
                        (g.constant(a), g.constant(b))
                    };
                    let y = f(&mut g, a, b).unwrap();
                    let s = g.sin(y).unwrap();
                    let l = g.sum(s).unwrap();
                    (g, a, b, l)
                };
                let (g, av, bv, l) = eval(a0.clone(), b0.clone(), true);
                let grads = g.backward(l).unwrap();
                let mut flat = a0.data().to_vec();
                flat.extend_from_slice(b0.data());
                let na = a0.numel();
                let numeric = finite_diff_grad(
                    |p| {
                        let a = Tensor::new(a0.shape().to_vec(), p[..na].to_vec())?;
                        let b = Tensor::new(b0.shape().to_vec(), p[na..].to_vec())?;
                        let (g, _, _, l) = eval(a, b, false);
                        g.value(l).item()
                    },
                    &flat,
                    1e-5,
                )
                .unwrap();
                let mut analytic = grads.get(av).into_data();
                analytic.extend(grads.get(bv).into_data());
                for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                    assert!(rel < 1e-6, "{name}[{i}]: analytic {a} numeric {n}");
                }
            }
        }
    }

    /// Two algebraically equal graphs give the same gradient.
    #[test]
    fn equivalent_graphs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_matrix(&mut rng, 5, 2);
        // f(x) = sum(silu(x)) built directly and as x * sigmoid(x)
        let mut g1 = Graph::new();
        let x1 = g1.param(x0.clone());
        let s1 = g1.silu(x1).unwrap();
        let l1 = g1.sum(s1).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.param(x0);
        let sg = g2.sigmoid(x2).unwrap();
        let p = g2.mul(x2, sg).unwrap();
        let l2 = g2.sum(p).unwrap();
        let a = g1.backward(l1).unwrap().get(x1);
        let b = g2.backward(l2).unwrap().get(x2);
        assert!(a.max_abs_diff(&b) < 1e-14);
        assert!((g1.value(l1).item().unwrap() - g2.value(l2).item().unwrap()).abs() < 1e-14);
    }

    #[test]
    fn untracked_ops_are_not_recorded() {
        let mut g = Graph::new();
        let c = g.constant(vec_t(&[1.0, 2.0]));
        let _ = g.exp(c).unwrap();
        assert_eq!(g.recorded_ops(), 0);
        let p = g.param(vec_t(&[1.0, 2.0]));
        let _ = g.add(p, c).unwrap();
        assert_eq!(g.recorded_ops(), 1);
    }
}
