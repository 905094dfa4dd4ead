//! Define-by-run reverse-mode differentiation over rank-2 arrays.
//!
//! Building an operation only checks shapes; values are computed by
//! [`Graph::forward`] and gradients by [`Graph::backward`]. A graph is meant
//! to be rebuilt for every minibatch.

use std::rc::Rc;

use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Neg(Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy(Var, Rc<[usize]>),
    Entropy(Var),
    Pick(Var, Rc<[usize]>),
    MaxCols(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
    ConcatCols(Rc<[Var]>),
    ConcatRows(Rc<[Var]>),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Rc<[usize]>),
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Neg(..) => "neg",
            Op::Elu(..) => "elu",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Entropy(..) => "entropy",
            Op::Pick(..) => "pick",
            Op::MaxCols(..) => "max_cols",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogMeanExp(..) => "log_mean_exp",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Array>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when `var` does not influence the root through differentiable paths.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, var: Var, rows: usize, cols: usize) -> Array {
        self.get(var).cloned().unwrap_or_else(|| Array::zeros(rows, cols))
    }
}

#[derive(Default, Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluated value of `v`, if [`forward`](Self::forward) has reached it.
    pub fn value(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].value.as_ref()
    }

    fn leaf(&mut self, value: Array, requires_grad: bool, what: &str) -> Result<Var> {
        if value.rank() != 2 {
            return Err(Error::shape("leaf", format!("graph arrays must be rank 2, got {:?}", value.shape())));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{what} leaf of shape {:?}", value.shape())));
        }
        let (rows, cols) = (value.rows(), value.cols());
        self.nodes.push(Node { op: Op::Leaf, rows, cols, value: Some(value), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (a parameter or an input whose gradient is wanted).
    pub fn param(&mut self, value: Array) -> Result<Var> {
        self.leaf(value, true, "parameter")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.leaf(value, false, "constant")
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, parents: &[Var]) -> Var {
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, rows, cols, value: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        Ok(self.push(Op::MatMul(a, b), m, n, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), r, c, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), r, c, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), r, c, &[a, b]))
    }

    /// Adds a `[1, m]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.shape(x), self.shape(row));
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", format!("[{r}, {c}] + [{br}, {bc}]")));
        }
        Ok(self.push(Op::AddRow(x, row), r, c, &[x, row]))
    }

    /// Multiplies every entry of `x` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let (r, c) = self.shape(x);
        Ok(self.push(Op::MulScalar(x, s), r, c, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let (r, c) = self.shape(x);
        self.push(Op::Scale(x, k), r, c, &[x])
    }

    pub fn shift(&mut self, x: Var, k: f64) -> Var {
        let (r, c) = self.shape(x);
        self.push(Op::Shift(x, k), r, c, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        self.push(Op::Neg(x), r, c, &[x])
    }

    fn unary(&mut self, x: Var, op: Op) -> Var {
        let (r, c) = self.shape(x);
        self.push(op, r, c, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softmax(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSoftmax(x))
    }

    /// Per-row cross-entropy of `logits` against class `targets`; `[n, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        check_indices("cross_entropy", r, c, targets)?;
        Ok(self.push(Op::CrossEntropy(logits, targets.into()), r, 1, &[logits]))
    }

    /// Per-row entropy of the distribution `softmax(logits)`; `[n, 1]`.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let (r, _) = self.shape(logits);
        self.push(Op::Entropy(logits), r, 1, &[logits])
    }

    /// `x[i, idx[i]]` for every row; `[n, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        check_indices("pick", r, c, idx)?;
        Ok(self.push(Op::Pick(x, idx.into()), r, 1, &[x]))
    }

    /// Row-wise maximum; `[n, 1]`. Ties route the gradient to the lowest index.
    pub fn max_cols(&mut self, x: Var) -> Var {
        let (r, _) = self.shape(x);
        self.push(Op::MaxCols(x), r, 1, &[x])
    }

    /// Row-wise sum over columns; `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, _) = self.shape(x);
        self.push(Op::SumCols(x), r, 1, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x), 1, 1, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x), 1, 1, &[x])
    }

    /// `log(mean(exp(x)))` over all entries, computed stably.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        self.push(Op::LogMeanExp(x), 1, 1, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            cols += c;
        }
        Ok(self.push(Op::ConcatCols(parts.into()), rows, cols, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
        }
        Ok(self.push(Op::ConcatRows(parts.into()), rows, cols, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        Ok(self.push(Op::SliceRows(x, start, end), end - start, c, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {r}")));
        }
        Ok(self.push(Op::GatherRows(x, idx.into()), idx.len(), c, &[x]))
    }

    /// Passes the value through and blocks the gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        self.push(Op::StopGradient(x), r, c, &[x])
    }

    /// Evaluates every pending node up to and including `root`.
    pub fn forward(&mut self, root: Var) -> Result<&Array> {
        for i in 0..=root.0 {
            if self.nodes[i].value.is_none() {
                let v = self.eval(i)?;
                self.nodes[i].value = Some(v);
            }
        }
        Ok(self.nodes[root.0].value.as_ref().expect("just evaluated"))
    }

    fn val(&self, v: Var) -> &Array {
        self.nodes[v.0].value.as_ref().expect("parents are evaluated before children")
    }

    fn eval(&self, i: usize) -> Result<Array> {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let out = match &node.op {
            Op::Leaf => unreachable!("leaves carry their value"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = vec![0.0; rows * cols];
                gemm(rows, a.cols(), cols, a.data(), false, b.data(), false, 0.0, &mut out);
                Array::from_shape_unchecked(vec![rows, cols], out)
            }
            Op::Add(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x * y),
            Op::AddRow(x, b) => {
                let (x, b) = (self.val(*x), self.val(*b));
                let mut out = x.clone();
                for r in out.data_mut().chunks_exact_mut(cols) {
                    for (o, bb) in r.iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                out
            }
            Op::MulScalar(x, s) => {
                let s = self.val(*s).item();
                self.val(*x).map(|v| v * s)
            }
            Op::Scale(x, k) => self.val(*x).map(|v| v * k),
            Op::Shift(x, k) => self.val(*x).map(|v| v + k),
            Op::Neg(x) => self.val(*x).map(|v| -v),
            Op::Elu(x) => self.val(*x).map(elu),
            Op::Relu(x) => self.val(*x).map(|v| v.max(0.0)),
            Op::Exp(x) => self.val(*x).map(f64::exp),
            Op::Log(x) => self.val(*x).map(f64::ln),
            Op::Abs(x) => self.val(*x).map(f64::abs),
            Op::Square(x) => self.val(*x).map(|v| v * v),
            Op::Softmax(x) => softmax_rows(self.val(*x)),
            Op::LogSoftmax(x) => {
                let x = self.val(*x);
                let mut out = x.clone();
                for r in out.data_mut().chunks_exact_mut(cols) {
                    let lse = log_sum_exp(r);
                    r.iter_mut().for_each(|v| *v -= lse);
                }
                out
            }
            Op::CrossEntropy(x, t) => {
                let x = self.val(*x);
                let data = x.iter_rows().zip(t.iter()).map(|(r, &k)| log_sum_exp(r) - r[k]).collect();
                Array::from_shape_unchecked(vec![rows, 1], data)
            }
            Op::Entropy(x) => {
                let x = self.val(*x);
                let data = x.iter_rows().map(row_entropy).collect();
                Array::from_shape_unchecked(vec![rows, 1], data)
            }
            Op::Pick(x, idx) => {
                let x = self.val(*x);
                let data = x.iter_rows().zip(idx.iter()).map(|(r, &k)| r[k]).collect();
                Array::from_shape_unchecked(vec![rows, 1], data)
            }
            Op::MaxCols(x) => {
                let x = self.val(*x);
                let data = x.iter_rows().map(|r| r[argmax(r)]).collect();
                Array::from_shape_unchecked(vec![rows, 1], data)
            }
            Op::SumCols(x) => {
                let x = self.val(*x);
                let data = x.iter_rows().map(|r| r.iter().sum()).collect();
                Array::from_shape_unchecked(vec![rows, 1], data)
            }
            Op::Sum(x) => Array::scalar(self.val(*x).sum()),
            Op::Mean(x) => Array::scalar(self.val(*x).mean()),
            Op::LogMeanExp(x) => {
                let x = self.val(*x);
                Array::scalar(log_sum_exp(x.data()) - (x.len() as f64).ln())
            }
            Op::ConcatCols(parts) => {
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts.iter() {
                        data.extend_from_slice(self.val(*p).row_slice(r));
                    }
                }
                Array::from_shape_unchecked(vec![rows, cols], data)
            }
            Op::ConcatRows(parts) => {
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts.iter() {
                    data.extend_from_slice(self.val(*p).data());
                }
                Array::from_shape_unchecked(vec![rows, cols], data)
            }
            Op::SliceRows(x, s, e) => {
                let x = self.val(*x);
                Array::from_shape_unchecked(vec![rows, cols], x.data()[s * cols..e * cols].to_vec())
            }
            Op::GatherRows(x, idx) => self.val(*x).select_rows(idx),
            Op::StopGradient(x) => self.val(*x).clone(),
        };
        Ok(out)
    }

    /// Gradients of the scalar `root` with respect to every differentiable node.
    ///
    /// Contributions from several uses of one node accumulate additively.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let node = &self.nodes[root.0];
        if node.value.is_none() {
            return Err(Error::NotEvaluated(root.0));
        }
        if (node.rows, node.cols) != (1, 1) {
            return Err(Error::shape("backward", format!("root must be [1, 1], got [{}, {}]", node.rows, node.cols)));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        if node.requires_grad {
            grads[root.0] = Some(Array::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = node.value.as_ref().expect("evaluated");
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = av.cols();
                if wants(a) {
                    let mut d = vec![0.0; rows * k];
                    gemm(rows, cols, k, g.data(), false, bv.data(), true, 0.0, &mut d);
                    acc(*a, Array::from_shape_unchecked(vec![rows, k], d));
                }
                if wants(b) {
                    let mut d = vec![0.0; k * cols];
                    gemm(k, rows, cols, av.data(), true, g.data(), false, 0.0, &mut d);
                    acc(*b, Array::from_shape_unchecked(vec![k, cols], d));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(*a, g.clone());
                }
                if wants(b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(*a, g.clone());
                }
                if wants(b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(*a, g.zip_map(self.val(*b), |d, v| d * v));
                }
                if wants(b) {
                    acc(*b, g.zip_map(self.val(*a), |d, v| d * v));
                }
            }
            Op::AddRow(x, b) => {
                if wants(x) {
                    acc(*x, g.clone());
                }
                if wants(b) {
                    let mut d = vec![0.0; cols];
                    for r in g.iter_rows() {
                        for (o, v) in d.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    acc(*b, Array::from_shape_unchecked(vec![1, cols], d));
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.val(*s).item();
                if wants(x) {
                    acc(*x, g.map(|d| d * sv));
                }
                if wants(s) {
                    let d: f64 = g.data().iter().zip(self.val(*x).data()).map(|(d, v)| d * v).sum();
                    acc(*s, Array::scalar(d));
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|d| d * k)),
            Op::Shift(x, _) => acc(*x, g.clone()),
            Op::Neg(x) => acc(*x, g.map(|d| -d)),
            Op::Elu(x) => {
                let xv = self.val(*x);
                let d = g.zip_map(xv, |d, v| if v > 0.0 { d } else { d * v.exp() });
                acc(*x, d)
            }
            Op::Relu(x) => acc(*x, g.zip_map(self.val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Exp(x) => acc(*x, g.zip_map(y, |d, v| d * v)),
            Op::Log(x) => acc(*x, g.zip_map(self.val(*x), |d, v| d / v)),
            Op::Abs(x) => acc(*x, g.zip_map(self.val(*x), |d, v| if v > 0.0 { d } else if v < 0.0 { -d } else { 0.0 })),
            Op::Square(x) => acc(*x, g.zip_map(self.val(*x), |d, v| 2.0 * d * v)),
            Op::Softmax(x) => {
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_exact_mut(cols).zip(y.iter_rows()) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &p) in dr.iter_mut().zip(yr) {
                        *o = p * (*o - dot);
                    }
                }
                acc(*x, d)
            }
            Op::LogSoftmax(x) => {
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_exact_mut(cols).zip(y.iter_rows()) {
                    let total: f64 = dr.iter().sum();
                    for (o, &lp) in dr.iter_mut().zip(yr) {
                        *o -= lp.exp() * total;
                    }
                }
                acc(*x, d)
            }
            Op::CrossEntropy(x, t) => {
                let mut d = softmax_rows(self.val(*x));
                let c = d.cols();
                for (r, (dr, &k)) in d.data_mut().chunks_exact_mut(c).zip(t.iter()).enumerate() {
                    dr[k] -= 1.0;
                    let gi = g.data()[r];
                    dr.iter_mut().for_each(|v| *v *= gi);
                }
                acc(*x, d)
            }
            Op::Entropy(x) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = Vec::with_capacity(xv.len());
                for (r, xr) in xv.iter_rows().enumerate() {
                    let lse = log_sum_exp(xr);
                    let h = y.data()[r];
                    let gi = g.data()[r];
                    d.extend(xr.iter().map(|&v| {
                        let lp = v - lse;
                        -gi * lp.exp() * (lp + h)
                    }));
                }
                acc(*x, Array::from_shape_unchecked(vec![xv.rows(), c], d))
            }
            Op::Pick(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut d = Array::zeros(r, c);
                for (i, &k) in idx.iter().enumerate() {
                    d.data_mut()[i * c + k] = g.data()[i];
                }
                acc(*x, d)
            }
            Op::MaxCols(x) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = Array::zeros(xv.rows(), c);
                for (i, r) in xv.iter_rows().enumerate() {
                    d.data_mut()[i * c + argmax(r)] = g.data()[i];
                }
                acc(*x, d)
            }
            Op::SumCols(x) => {
                let (r, c) = self.shape(*x);
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                acc(*x, Array::from_shape_unchecked(vec![r, c], d))
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Array::full(r, c, g.item()))
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Array::full(r, c, g.item() / (r * c) as f64))
            }
            Op::LogMeanExp(x) => {
                let xv = self.val(*x);
                let lse = log_sum_exp(xv.data());
                let gi = g.item();
                acc(*x, xv.map(|v| gi * (v - lse).exp()))
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let (pr, pc) = self.shape(*p);
                    if wants(p) {
                        let mut d = Vec::with_capacity(pr * pc);
                        for r in g.iter_rows() {
                            d.extend_from_slice(&r[offset..offset + pc]);
                        }
                        acc(*p, Array::from_shape_unchecked(vec![pr, pc], d));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let (pr, pc) = self.shape(*p);
                    if wants(p) {
                        let d = g.data()[offset * pc..(offset + pr) * pc].to_vec();
                        acc(*p, Array::from_shape_unchecked(vec![pr, pc], d));
                    }
                    offset += pr;
                }
            }
            Op::SliceRows(x, s, _) => {
                let (r, c) = self.shape(*x);
                let mut d = Array::zeros(r, c);
                d.data_mut()[s * c..s * c + g.len()].copy_from_slice(g.data());
                acc(*x, d)
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut d = Array::zeros(r, c);
                for (i, &k) in idx.iter().enumerate() {
                    for (o, v) in d.data_mut()[k * c..(k + 1) * c].iter_mut().zip(g.row_slice(i)) {
                        *o += v;
                    }
                }
                acc(*x, d)
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, d: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn check_indices(op: &'static str, rows: usize, cols: usize, idx: &[usize]) -> Result<()> {
    if idx.len() != rows {
        return Err(Error::shape(op, format!("{} indices for {rows} rows", idx.len())));
    }
    if let Some(&bad) = idx.iter().find(|&&k| k >= cols) {
        return Err(Error::shape(op, format!("class {bad} out of {cols}")));
    }
    Ok(())
}

pub(crate) fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in r.iter().enumerate().skip(1) {
        if v > r[best] {
            best = j;
        }
    }
    best
}

fn row_entropy(r: &[f64]) -> f64 {
    let lse = log_sum_exp(r);
    -r.iter().map(|&v| {
        let lp = v - lse;
        lp.exp() * lp
    })
    .sum::<f64>()
}

/// Row-wise softmax of a plain array.
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    let c = out.cols();
    for r in out.data_mut().chunks_exact_mut(c) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        r.iter_mut().for_each(|v| *v /= z);
    }
    out
}
