//! The recording tape and the primitive operations.
//!
//! A [`Graph`] is an append-only list of nodes. Every primitive evaluates its
//! forward value eagerly and records enough information for the reverse pass.
//! Because nodes can only reference earlier nodes, the list is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    SqErr(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Dot(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Softmax(Var, f64),
    GaussLogPdf { mean: Var, std: Var, sample: Var },
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Reshape(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Broadcasting mode of an elementwise binary op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

/// Recording tape. Not shareable across threads while being built; build one
/// per unit of work.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn unary_shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if a.is_scalar() {
        Ok((Bcast::LhsScalar, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Bcast::RhsScalar, a.shape().to_vec()))
    } else {
        Err(unary_shape_err(op, a, b))
    }
}

fn zip_with(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::LhsScalar => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Bcast::RhsScalar => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    }
}

/// `c (r x n) += a (r x k) * b (k x n)`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    r: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if r == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= r * n);
    // SAFETY: the strides address exactly the r*k, k*n and r*n elements of the
    // provided slices, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            r,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(v.0))
        }
    }

    /// Trainable input: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copy of `v` cut from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (mode, shape) = bcast(name, ta, tb)?;
        let data = zip_with(ta, tb, mode, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product (a scalar operand broadcasts).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    /// Elementwise squared error `(a - b)^2`.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sq_err", a, b, |x, y| (x - y) * (x - y), Op::SqErr(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Offset(a))
    }

    /// `c - a` for a constant `c`.
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, c)
    }

    /// Matrix `(r x c)` times vector `(c)`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        self.check(m)?;
        self.check(x)?;
        let (tm, tx) = (&self.nodes[m.0].value, &self.nodes[x.0].value);
        if tm.shape().len() != 2 || tx.shape().len() != 1 || tm.shape()[1] != tx.shape()[0] {
            return Err(unary_shape_err("matvec", tm, tx));
        }
        let (r, c) = (tm.shape()[0], tm.shape()[1]);
        let xv = tx.data();
        let md = tm.data();
        let out: Vec<f64> = (0..r)
            .map(|i| md[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(&[m, x]);
        Ok(self.push(Tensor::vector(out), rg, Op::MatVec(m, x)))
    }

    /// Matrix `(r x k)` times matrix `(k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(unary_shape_err("matmul", ta, tb));
        }
        let (r, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, n, out)?, rg, Op::MatMul(a, b)))
    }

    /// `a (r x k)` times the transpose of `b (n x k)`, giving `r x n`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(unary_shape_err("matmul_t", ta, tb));
        }
        let (r, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, ta.data(), k as isize, 1, tb.data(), 1, k as isize, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, n, out)?, rg, Op::MatMulT(a, b)))
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(unary_shape_err("dot", ta, tb));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Dot(a, b)))
    }

    /// Adds a row vector `(n)` to every row of a matrix `(r x n)`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.check(m)?;
        self.check(row)?;
        let (tm, tr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        if tm.shape().len() != 2 || tr.shape().len() != 1 || tm.shape()[1] != tr.shape()[0] {
            return Err(unary_shape_err("add_row", tm, tr));
        }
        let n = tr.len();
        let rd = tr.data();
        let data: Vec<f64> = tm.data().iter().enumerate().map(|(i, &v)| v + rd[i % n]).collect();
        let shape = tm.shape().to_vec();
        let rg = self.rg(&[m, row]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddRow(m, row)))
    }

    /// Multiplies every row of a matrix `(r x n)` elementwise by `row (n)`.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.check(m)?;
        self.check(row)?;
        let (tm, tr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        if tm.shape().len() != 2 || tr.shape().len() != 1 || tm.shape()[1] != tr.shape()[0] {
            return Err(unary_shape_err("mul_row", tm, tr));
        }
        let n = tr.len();
        let rd = tr.data();
        let data: Vec<f64> = tm.data().iter().enumerate().map(|(i, &v)| v * rd[i % n]).collect();
        let shape = tm.shape().to_vec();
        let rg = self.rg(&[m, row]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::MulRow(m, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(value, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|v| !(**v > 0.0)) {
            return Err(AutodiffError::Domain { op: "ln", value: bad });
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    /// Absolute value; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`; no gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(AutodiffError::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    /// Sum over the last axis: `(r x c) -> (r)`, `(n) -> ()`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let data: Vec<f64> = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let value = if t.shape().len() == 2 {
            Tensor::vector(data)
        } else {
            Tensor::scalar(data[0])
        };
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::RowSum(a))
    }

    /// Row-wise softmax of `a / tau` over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(AutodiffError::Temperature(tau));
        }
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(AutodiffError::Empty("softmax"));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(softmax_row(&t.data()[r * c..(r + 1) * c], tau));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Softmax(a, tau)))
    }

    /// Elementwise Gaussian log-density of `sample` under `N(mean, std^2)`.
    pub fn gaussian_log_pdf(&mut self, mean: Var, std: Var, sample: Var) -> Result<Var> {
        let (tm, ts, tx) = (
            &self.nodes[mean.0].value,
            &self.nodes[std.0].value,
            &self.nodes[sample.0].value,
        );
        if tm.shape() != ts.shape() {
            return Err(unary_shape_err("gaussian_log_pdf", tm, ts));
        }
        if tm.shape() != tx.shape() {
            return Err(unary_shape_err("gaussian_log_pdf", tm, tx));
        }
        if let Some(&bad) = ts.data().iter().find(|v| !(**v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "gaussian_log_pdf",
                value: bad,
            });
        }
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let data: Vec<f64> = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(tx.data())
            .map(|((&mu, &s), &x)| {
                let z = (x - mu) / s;
                -0.5 * z * z - s.ln() - half_ln_2pi
            })
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        let rg = self.rg(&[mean, std, sample]);
        Ok(self.push(value, rg, Op::GaussLogPdf { mean, std, sample }))
    }

    /// Horizontal concatenation. Vectors count as single columns; all parts
    /// must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let rows = col_rows(&self.nodes[first.0].value);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            self.check(*p)?;
            let t = &self.nodes[p.0].value;
            if col_rows(t) != rows || t.shape().is_empty() {
                return Err(unary_shape_err("concat_cols", &self.nodes[first.0].value, t));
            }
            widths.push(col_width(t));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, total, data)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, m: Var, j: usize) -> Result<Var> {
        let t = &self.nodes[m.0].value;
        if t.shape().len() != 2 || j >= t.shape()[1] {
            return Err(AutodiffError::Shape {
                op: "column",
                lhs: t.shape().to_vec(),
                rhs: vec![j],
            });
        }
        let c = t.shape()[1];
        let data: Vec<f64> = (0..t.shape()[0]).map(|r| t.data()[r * c + j]).collect();
        let rg = self.rg(&[m]);
        Ok(self.push(Tensor::vector(data), rg, Op::Column(m, j)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Straight-through combination `hard + soft - stop_grad(soft)`.
    ///
    /// The forward value is `hard` exactly and the reverse pass hands the
    /// incoming gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        self.check(soft)?;
        let ts = &self.nodes[soft.0].value;
        if ts.shape() != hard.shape() {
            return Err(unary_shape_err("straight_through", &hard, ts));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, rg, Op::StraightThrough(soft)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |buf| reduce_into(buf, g, 1.0));
                acc(*b, &mut |buf| reduce_into(buf, g, sign));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |buf| reduce_prod_into(buf, g, tb));
                acc(*b, &mut |buf| reduce_prod_into(buf, g, ta));
            }
            Op::Min(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mode = bcast("min", ta, tb).expect("checked forward").0;
                let pick_b: Vec<bool> = zip_with(ta, tb, mode, |x, y| if y < x { 1.0 } else { 0.0 })
                    .into_iter()
                    .map(|v| v > 0.5)
                    .collect();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&pick_b)
                    .map(|(&gi, &p)| if p { 0.0 } else { gi })
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&pick_b)
                    .map(|(&gi, &p)| if p { gi } else { 0.0 })
                    .collect();
                acc(*a, &mut |buf| reduce_into(buf, &ga, 1.0));
                acc(*b, &mut |buf| reduce_into(buf, &gb, 1.0));
            }
            Op::SqErr(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mode = bcast("sq_err", ta, tb).expect("checked forward").0;
                let diff = zip_with(ta, tb, mode, |x, y| x - y);
                let gd: Vec<f64> = g.iter().zip(&diff).map(|(gi, d)| 2.0 * gi * d).collect();
                acc(*a, &mut |buf| reduce_into(buf, &gd, 1.0));
                acc(*b, &mut |buf| reduce_into(buf, &gd, -1.0));
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += c * gi;
                }
            }),
            Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => acc(*a, &mut |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }),
            Op::MatVec(m, x) => {
                let (tm, tx) = (val(*m), val(*x));
                let (r, c) = (tm.shape()[0], tm.shape()[1]);
                acc(*m, &mut |buf| {
                    for i in 0..r {
                        let gi = g[i];
                        if gi != 0.0 {
                            for (b, xj) in buf[i * c..(i + 1) * c].iter_mut().zip(tx.data()) {
                                *b += gi * xj;
                            }
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        let gi = g[i];
                        if gi != 0.0 {
                            for (b, mij) in buf.iter_mut().zip(&tm.data()[i * c..(i + 1) * c]) {
                                *b += gi * mij;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC * B^T
                acc(*a, &mut |buf| {
                    gemm(r, n, k, g, n as isize, 1, tb.data(), 1, n as isize, buf)
                });
                // dB = A^T * dC
                acc(*b, &mut |buf| {
                    gemm(k, r, n, ta.data(), 1, k as isize, g, n as isize, 1, buf)
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // dA = dC * B
                acc(*a, &mut |buf| {
                    gemm(r, n, k, g, n as isize, 1, tb.data(), k as isize, 1, buf)
                });
                // dB = dC^T * A
                acc(*b, &mut |buf| {
                    gemm(n, r, k, g, 1, n as isize, ta.data(), k as isize, 1, buf)
                });
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let gi = g[0];
                acc(*a, &mut |buf| {
                    for (bf, y) in buf.iter_mut().zip(tb.data()) {
                        *bf += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for (bf, x) in buf.iter_mut().zip(ta.data()) {
                        *bf += gi * x;
                    }
                });
            }
            Op::AddRow(m, row) => {
                let n = val(*row).len();
                acc(*m, &mut |buf| {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b += gi;
                    }
                });
                acc(*row, &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % n] += gi;
                    }
                });
            }
            Op::MulRow(m, row) => {
                let (tm, tr) = (val(*m), val(*row));
                let n = tr.len();
                acc(*m, &mut |buf| {
                    for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
                        *b += gi * tr.data()[i % n];
                    }
                });
                acc(*row, &mut |buf| {
                    for (i, (gi, mi)) in g.iter().zip(tm.data()).enumerate() {
                        buf[i % n] += gi * mi;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for ((b, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for ((b, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gi * (1.0 - y * y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |buf| {
                for ((b, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gi * y;
                }
            }),
            Op::Ln(a) => {
                let ta = val(*a);
                acc(*a, &mut |buf| {
                    for ((b, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        *b += gi / x;
                    }
                })
            }
            Op::Abs(a) => {
                let ta = val(*a);
                acc(*a, &mut |buf| {
                    for ((b, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        let s = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *b += gi * s;
                    }
                })
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &mut |buf| {
                    for ((b, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *b += gi;
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a);
                acc(*a, &mut |buf| {
                    for ((b, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        if *x >= *lo && *x <= *hi {
                            *b += gi;
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |buf| {
                for b in buf.iter_mut() {
                    *b += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0] / n;
                    }
                })
            }
            Op::RowSum(a) => {
                let c = val(*a).cols();
                acc(*a, &mut |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i / c];
                    }
                })
            }
            Op::Softmax(a, tau) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for r in 0..out.rows() {
                        let s = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dotp: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            buf[r * c + j] += s[j] * (gr[j] - dotp) / tau;
                        }
                    }
                })
            }
            Op::GaussLogPdf { mean, std, sample } => {
                let (tm, ts, tx) = (val(*mean), val(*std), val(*sample));
                let z: Vec<f64> = tm
                    .data()
                    .iter()
                    .zip(ts.data())
                    .zip(tx.data())
                    .map(|((&mu, &s), &x)| (x - mu) / s)
                    .collect();
                acc(*mean, &mut |buf| {
                    for (((b, gi), zi), s) in buf.iter_mut().zip(g).zip(&z).zip(ts.data()) {
                        *b += gi * zi / s;
                    }
                });
                acc(*std, &mut |buf| {
                    for (((b, gi), zi), s) in buf.iter_mut().zip(g).zip(&z).zip(ts.data()) {
                        *b += gi * (zi * zi - 1.0) / s;
                    }
                });
                acc(*sample, &mut |buf| {
                    for (((b, gi), zi), s) in buf.iter_mut().zip(g).zip(&z).zip(ts.data()) {
                        *b -= gi * zi / s;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for p in parts {
                    let w = col_width(val(*p));
                    acc(*p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Column(m, j) => {
                let c = val(*m).shape()[1];
                acc(*m, &mut |buf| {
                    for (r, gi) in g.iter().enumerate() {
                        buf[r * c + j] += gi;
                    }
                })
            }
        }
    }
}

fn col_rows(t: &Tensor) -> usize {
    match t.shape().len() {
        0 => 1,
        _ => t.shape()[0],
    }
}

fn col_width(t: &Tensor) -> usize {
    match t.shape().len() {
        2 => t.shape()[1],
        _ => 1,
    }
}

/// Adds `sign * g` into `buf`, summing when `buf` is a broadcast scalar.
fn reduce_into(buf: &mut [f64], g: &[f64], sign: f64) {
    if buf.len() == g.len() {
        for (b, gi) in buf.iter_mut().zip(g) {
            *b += sign * gi;
        }
    } else {
        buf[0] += sign * g.iter().sum::<f64>();
    }
}

/// Adds `g * other` into `buf`, where `other` may be a broadcast scalar and
/// `buf` may be one too.
fn reduce_prod_into(buf: &mut [f64], g: &[f64], other: &Tensor) {
    let o = other.data();
    let term = |i: usize| if o.len() == 1 { o[0] } else { o[i] };
    if buf.len() == g.len() {
        for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += gi * term(i);
        }
    } else {
        buf[0] += g.iter().enumerate().map(|(i, gi)| gi * term(i)).sum::<f64>();
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

/// Max-shifted softmax of `row / tau`.
pub fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
