//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits
//! each node after all of its consumers. The graph is meant to be built for
//! one loss evaluation and dropped after [`Graph::backward`].

use super::params::{Gradients, ParamBinding, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule for [`Graph::custom`]: receives the output adjoint,
/// the input values and the output value, returns one adjoint per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    LogCumSumExp(Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            return Err(Error::Shape(format!("{op}: cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape[0], shape[1], data).expect("shape");
    }
    let [r, c] = shape;
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(a.get(ia, ja), b.get(ib, jb)));
        }
    }
    Tensor::new(r, c, data).expect("shape")
}

/// Sums `grad` down to `shape`, undoing a broadcast.
fn reduce_to(grad: Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let [r, c] = grad.shape();
    for i in 0..r {
        let io = if shape[0] == 1 { 0 } else { i };
        for j in 0..c {
            let jo = if shape[1] == 1 { 0 } else { j };
            let v = out.get(io, jo) + grad.get(i, j);
            out.set(io, jo, v);
        }
    }
    out
}

/// Value at `(i, j)` of `t` viewed under a broadcast to a larger shape.
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let ii = if t.rows() == 1 { 0 } else { i };
    let jj = if t.cols() == 1 { 0 } else { j };
    t.get(ii, jj)
}

fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::LogCumSumExp(a) => self.ng(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Custom(vs, _) => {
                vs.iter().any(|v| self.ng(*v))
            }
        };
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(id))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(id)
    }

    /// Leaf that receives gradients but is not a stored parameter; useful for
    /// differentiating with respect to inputs.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(id)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds every parameter of `store` as a leaf of this graph.
    pub fn bind(&mut self, store: &ParamStore) -> ParamBinding {
        let vars = store
            .iter()
            .map(|(_, _, t)| {
                let idx = self.nodes.len();
                self.nodes.push(Node { value: t.clone(), op: Op::Param, needs_grad: true });
                Var(idx)
            })
            .collect();
        ParamBinding::new(vars)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.value(a).shape(), self.value(b).shape())?;
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("div", self.value(a).shape(), self.value(b).shape())?;
        if self.value(b).data().iter().any(|&x| x == 0.0) {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        let v = zip_broadcast(self.value(a), self.value(b), shape, |x, y| x / y);
        self.push("div", v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("argument {bad} <= 0") });
        }
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain { op: "sqrt", detail: format!("argument {bad} < 0") });
        }
        let v = self.value(a).map(f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push("softplus", v, Op::Softplus(a))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", v, Op::Clamp(a, lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [r, c] = x.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / s));
        }
        let v = Tensor::new(r, c, data)?;
        self.push("softmax", v, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("mean", v, Op::Mean(a))
    }

    /// Concatenates along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
        }
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let v = Tensor::new(rows, cols, data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks along rows; all inputs share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::Shape("concat_rows: column counts differ".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let v = Tensor::new(x.rows(), end - start, data)?;
        self.push("slice_cols", v, Op::SliceCols(a, start))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {:?}", x.shape())));
        }
        let c = x.cols();
        let v = Tensor::new(end - start, c, x.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows(a, start))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= x.rows() {
                return Err(Error::Shape(format!("gather row {i} of {:?}", x.shape())));
            }
            data.extend_from_slice(x.row_slice(i));
        }
        let v = Tensor::new(idx.len(), c, data)?;
        self.push("gather_rows", v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Running log-sum-exp down a column: `out[i] = log sum_{k<=i} exp(x[k])`.
    pub fn log_cumsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 {
            return Err(Error::Shape(format!("log_cumsumexp needs a column, got {:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(x.rows());
        let mut acc = f64::NEG_INFINITY;
        for &v in x.data() {
            acc = if acc == f64::NEG_INFINITY {
                v
            } else {
                let m = acc.max(v);
                m + ((acc - m).exp() + (v - m).exp()).ln()
            };
            out.push(acc);
        }
        let v = Tensor::column(out);
        self.push("log_cumsumexp", v, Op::LogCumSumExp(a))
    }

    /// Records an operation with a caller-supplied value and local gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push("custom", value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Affine map `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        let shape = self.value(root).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.ng(target) {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, reduce_to(g.clone(), val(a).shape()));
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, reduce_to(g.clone(), val(b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, reduce_to(g.clone(), val(a).shape()));
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, reduce_to(g.map(|x| -x), val(b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let shape = g.shape();
                if self.ng(*a) {
                    let ga = zip_broadcast(g, tb, shape, |x, y| x * y);
                    self.accumulate(adj, *a, reduce_to(ga, ta.shape()));
                }
                if self.ng(*b) {
                    let gb = zip_broadcast(g, ta, shape, |x, y| x * y);
                    self.accumulate(adj, *b, reduce_to(gb, tb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let shape = g.shape();
                if self.ng(*a) {
                    let ga = zip_broadcast(g, tb, shape, |x, y| x / y);
                    self.accumulate(adj, *a, reduce_to(ga, ta.shape()));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out / b
                    let mut gb = Tensor::zeros(shape[0], shape[1]);
                    for r in 0..shape[0] {
                        for c in 0..shape[1] {
                            gb.set(r, c, -g.get(r, c) * out.get(r, c) / bget(tb, r, c));
                        }
                    }
                    self.accumulate(adj, *b, reduce_to(gb, tb.shape()));
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.matmul(&val(b).transpose())?;
                    self.accumulate(adj, *a, ga);
                }
                if self.ng(*b) {
                    let gb = val(a).transpose().matmul(g)?;
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Exp(a) => self.accumulate(adj, *a, hadamard(g, out, |gg, y| gg * y)),
            Op::Log(a) => self.accumulate(adj, *a, hadamard(g, val(a), |gg, x| gg / x)),
            Op::Sqrt(a) => self.accumulate(
                adj,
                *a,
                hadamard(g, out, |gg, y| if y > 0.0 { gg / (2.0 * y) } else { 0.0 }),
            ),
            Op::Square(a) => self.accumulate(adj, *a, hadamard(g, val(a), |gg, x| 2.0 * gg * x)),
            Op::Sigmoid(a) => {
                self.accumulate(adj, *a, hadamard(g, out, |gg, y| gg * y * (1.0 - y)))
            }
            Op::Tanh(a) => self.accumulate(adj, *a, hadamard(g, out, |gg, y| gg * (1.0 - y * y))),
            Op::Softplus(a) => {
                self.accumulate(adj, *a, hadamard(g, val(a), |gg, x| gg * sigmoid(x)))
            }
            Op::Relu(a) => self.accumulate(
                adj,
                *a,
                hadamard(g, val(a), |gg, x| if x > 0.0 { gg } else { 0.0 }),
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    adj,
                    *a,
                    hadamard(g, val(a), |gg, x| if x >= lo && x <= hi { gg } else { 0.0 }),
                )
            }
            Op::Softmax(a) => {
                let [r, c] = out.shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga.set(i, j, y[j] * (gy[j] - dot));
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let [r, c] = val(a).shape();
                self.accumulate(adj, *a, Tensor::full(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let [r, c] = val(a).shape();
                self.accumulate(adj, *a, Tensor::full(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [r, c] = val(p).shape();
                    if self.ng(*p) {
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        self.accumulate(adj, *p, Tensor::new(r, c, gp)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for p in parts {
                    let [r, c] = val(p).shape();
                    if self.ng(*p) {
                        let gp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(adj, *p, Tensor::new(r, c, gp)?);
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (j, &v) in g.row_slice(i).iter().enumerate() {
                        ga.set(i, start + j, v);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let [r, c] = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(adj, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let [r, c] = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = ga.get(src, j) + g.get(k, j);
                        ga.set(src, j, v);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::LogCumSumExp(a) => {
                // d out[i] / d x[k] = exp(x[k] - out[i]) for k <= i
                let x = val(a).data();
                let y = out.data();
                let n = x.len();
                let mut ga = vec![0.0; n];
                // suffix sums of g[i] * exp(-out[i]), scaled per k for stability
                let mut acc = 0.0;
                let mut acc_ref = f64::NEG_INFINITY;
                for k in (0..n).rev() {
                    // acc holds sum_{i>=k} g[i] exp(acc_ref - y[i])
                    let yi = y[k];
                    if acc_ref == f64::NEG_INFINITY {
                        acc_ref = yi;
                    }
                    let new_ref = acc_ref.min(yi);
                    acc *= (new_ref - acc_ref).exp();
                    acc_ref = new_ref;
                    acc += g.data()[k] * (acc_ref - yi).exp();
                    ga[k] = acc * (x[k] - acc_ref).exp();
                }
                self.accumulate(adj, *a, Tensor::column(ga));
            }
            Op::Custom(inputs, rule) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(v)).collect();
                let grads = rule(g, &vals, out);
                if grads.len() != inputs.len() {
                    return Err(Error::Shape("custom backward returned wrong arity".into()));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if gv.shape() != val(v).shape() {
                        return Err(Error::Shape("custom backward returned wrong shape".into()));
                    }
                    self.accumulate(adj, *v, gv);
                }
            }
        }
        Ok(())
    }
}

fn hadamard(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.rows(), g.cols(), data).expect("shape")
}

/// Adjoints produced by [`Graph::backward`].
pub struct Adjoints {
    adj: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Adjoint of `v`, or `None` when `v` is not on a path to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, zero-filled when unreachable.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let [r, c] = g.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients for every bound parameter, zero for unreachable ones.
    pub fn params(&self, g: &Graph, binding: &ParamBinding) -> Gradients {
        Gradients::new(binding.vars().iter().map(|&v| self.wrt(g, v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elementary_values() {
        let mut g = Graph::new();
        let z = g.scalar_const(0.0);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar(s).unwrap(), 0.5);

        let x = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let sm = g.softmax(x).unwrap();
        for &v in g.value(sm).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let two = g.scalar_const(2.0);
        let e = g.exp(two).unwrap();
        let l = g.log(e).unwrap();
        assert!(close(g.scalar(l).unwrap(), 2.0, 1e-15));
    }

    #[test]
    fn domain_errors_are_explicit() {
        let mut g = Graph::new();
        let z = g.scalar_const(0.0);
        assert!(matches!(g.log(z), Err(Error::Domain { op: "log", .. })));
        let m = g.scalar_const(-1.0);
        assert!(matches!(g.sqrt(m), Err(Error::Domain { op: "sqrt", .. })));
        let big = g.scalar_const(1000.0);
        assert!(matches!(g.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn simple_derivatives() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let adj = g.backward(y).unwrap();
        assert_eq!(adj.wrt(&g, x).item().unwrap(), 6.0);

        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.variable(Tensor::scalar(3.0));
        let p = g.mul(x, y).unwrap();
        let adj = g.backward(p).unwrap();
        assert_eq!(adj.wrt(&g, x).item().unwrap(), 3.0);
        assert_eq!(adj.wrt(&g, y).item().unwrap(), 2.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot([1, 2]))));
    }

    #[test]
    fn unreachable_leaf_gets_no_adjoint() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.5));
        let unused = g.variable(Tensor::row(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        let adj = g.backward(y).unwrap();
        assert!(adj.get(unused).is_none());
        assert_eq!(adj.wrt(&g, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let m = g.variable(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.variable(Tensor::row(vec![10.0, 20.0]));
        let s = g.add(m, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let t = g.sum(s).unwrap();
        let adj = g.backward(t).unwrap();
        assert_eq!(adj.wrt(&g, b).data(), &[2.0, 2.0]);
        assert_eq!(adj.wrt(&g, m).data(), &[1.0; 4]);
    }

    #[test]
    fn log_cumsumexp_matches_direct() {
        let xs = vec![0.3, -1.2, 2.0, 0.7, -0.1];
        let mut g = Graph::new();
        let x = g.variable(Tensor::column(xs.clone()));
        let y = g.log_cumsumexp(x).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let direct: f64 = xs[..=i].iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(close(v, direct, 1e-12));
        }
        // weighted sum so every output contributes a distinct adjoint
        let w = g.constant(Tensor::column(vec![0.5, -1.0, 2.0, 0.25, 1.5]));
        let wy = g.mul(y, w).unwrap();
        let s = g.sum(wy).unwrap();
        let adj = g.backward(s).unwrap();
        let ga = adj.wrt(&g, x);
        let h = 1e-6;
        let f = |v: &[f64]| -> f64 {
            let ws = [0.5, -1.0, 2.0, 0.25, 1.5];
            let mut acc = 0.0;
            for i in 0..v.len() {
                acc += ws[i] * v[..=i].iter().map(|t| t.exp()).sum::<f64>().ln();
            }
            acc
        };
        for k in 0..xs.len() {
            let mut p = xs.clone();
            p[k] += h;
            let mut m = xs.clone();
            m[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(close(ga.data()[k], fd, 1e-7), "k={k}: {} vs {fd}", ga.data()[k]);
        }
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![-800.0, 0.0, 800.0]));
        let y = g.softplus(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!(close(v[1], std::f64::consts::LN_2, 1e-15));
        assert_eq!(v[2], 800.0);
    }
}
