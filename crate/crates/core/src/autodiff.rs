//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! eagerly computed value, so node indices are already a topological order.
//! [`Graph::backward`] walks that list in reverse and accumulates gradients
//! into the leaves that were registered with [`Graph::param`].
//!
//! Broadcasting is deliberately narrow: binary element-wise ops accept a
//! right-hand scalar, and row broadcasting is an explicit op
//! ([`Graph::broadcast_rows`]). Every other shape mismatch is an error.

use thiserror::Error;

/// Smallest divisor magnitude accepted by [`Graph::div`].
pub const MIN_DIVISOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate scale: divisor magnitude below {MIN_DIVISOR:e}")]
    DegenerateScale,
    #[error("domain error in {0}")]
    Domain(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row count of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix (1 for vectors and scalars).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(AutodiffError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Abs(Var),
    Neg(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    PermuteCols(Var, Vec<usize>),
    Reshape(Var),
    LogSumExpRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default, Clone)]
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

    /// Registers a leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable leaf; its gradient accumulates on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dispatches an element-wise op by tag. Unary tags ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| AutodiffError::Shape("binary op needs two operands".into()));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Div => self.div(a, need_b()?),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Tanh => self.tanh(a),
            ElementwiseOp::Abs => self.abs(a),
        }
    }

    fn binary_values(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.is_scalar() {
            let y = tb.data[0];
            ta.data.iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(AutodiffError::Shape(format!(
                "{name}: shapes {:?} and {:?} are not compatible",
                ta.shape, tb.shape
            )));
        };
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.iter().any(|d| d.abs() < MIN_DIVISOR) {
            return Err(AutodiffError::DegenerateScale);
        }
        let v = self.binary_values(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b], "div")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(v, op, &[a], name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= 0.0) {
            return Err(AutodiffError::Domain("log of non-positive value"));
        }
        self.unary(a, Op::Log(a), "log", f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), "neg", |x| -x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(AutodiffError::Shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let v = Tensor {
            shape: vec![m, n],
            data,
        };
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// Sum of a matrix along `axis` (0: over rows, 1: over columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || axis > 1 {
            return Err(AutodiffError::Shape(format!(
                "sum_axis({axis}) on shape {:?}",
                t.shape
            )));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let v = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            Tensor::vector(out)
        } else {
            Tensor::vector((0..r).map(|i| t.row(i).iter().sum()).collect())
        };
        self.push(v, Op::SumAxis(a, axis), &[a], "sum_axis")
    }

    /// Repeats a `[n]` or `[1, n]` tensor as `rows` identical rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        let n = match t.shape.as_slice() {
            [n] => *n,
            [1, n] => *n,
            s => {
                return Err(AutodiffError::Shape(format!(
                    "broadcast_rows expects [n] or [1, n], got {s:?}"
                )))
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&t.data);
        }
        let v = Tensor {
            shape: vec![rows, n],
            data,
        };
        self.push(v, Op::BroadcastRows(a), &[a], "broadcast_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || start > end || end > t.shape[1] {
            return Err(AutodiffError::Shape(format!(
                "slice_cols {start}..{end} on {:?}",
                t.shape
            )));
        }
        let r = t.shape[0];
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor {
            shape: vec![r, end - start],
            data,
        };
        self.push(v, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || start > end || end > t.shape[0] {
            return Err(AutodiffError::Shape(format!(
                "slice_rows {start}..{end} on {:?}",
                t.shape
            )));
        }
        let c = t.shape[1];
        let v = Tensor {
            shape: vec![end - start, c],
            data: t.data[start * c..end * c].to_vec(),
        };
        self.push(v, Op::SliceRows(a, start), &[a], "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.shape.len() != 2 || t.shape[0] != r {
                return Err(AutodiffError::Shape(format!(
                    "concat_cols: part shape {:?} with {r} rows expected",
                    t.shape
                )));
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor {
            shape: vec![r, total],
            data,
        };
        self.push(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || perm.len() != t.shape[1] || perm.iter().any(|&p| p >= perm.len()) {
            return Err(AutodiffError::Shape(format!(
                "permute_cols: permutation of length {} on {:?}",
                perm.len(),
                t.shape
            )));
        }
        let r = t.shape[0];
        let mut data = Vec::with_capacity(t.numel());
        for i in 0..r {
            let row = t.row(i);
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let v = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(v, Op::PermuteCols(a, perm.to_vec()), &[a], "permute_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    /// Row-wise `log Σ_j exp(a_ij)` of a matrix, as a vector.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "log_sum_exp_rows on {:?}",
                t.shape
            )));
        }
        let v = Tensor::vector((0..t.rows()).map(|i| log_sum_exp(t.row(i))).collect());
        self.push(v, Op::LogSumExpRows(a), &[a], "log_sum_exp_rows")
    }

    /// `log Σ exp(a)` over every element, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let row = self.reshape(a, &[1, n])?;
        let v = self.log_sum_exp_rows(row)?;
        self.reshape(v, &[])
    }

    /// Accumulates d`loss`/d`leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if let Op::Leaf = self.nodes[id].op {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    for (a, x) in acc.data.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, || g.to_vec());
                self.accumulate_rhs(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, || g.to_vec());
                self.accumulate_rhs(adj, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let bval = |i: usize| if vb.len() == 1 { vb[0] } else { vb[i] };
                self.accumulate(adj, *a, || g.iter().enumerate().map(|(i, x)| x * bval(i)).collect());
                self.accumulate_rhs(adj, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let bval = |i: usize| if vb.len() == 1 { vb[0] } else { vb[i] };
                self.accumulate(adj, *a, || g.iter().enumerate().map(|(i, x)| x / bval(i)).collect());
                self.accumulate_rhs(
                    adj,
                    *b,
                    g.iter()
                        .enumerate()
                        .map(|(i, x)| -x * va[i] / (bval(i) * bval(i)))
                        .collect(),
                );
            }
            Op::Exp(a) => self.accumulate(adj, *a, || g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => {
                let va = &self.value(*a).data;
                self.accumulate(adj, *a, || g.iter().zip(va).map(|(x, y)| x / y).collect())
            }
            Op::Tanh(a) => self.accumulate(adj, *a, || {
                g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect()
            }),
            Op::Abs(a) => {
                let va = &self.value(*a).data;
                self.accumulate(adj, *a, || {
                    g.iter()
                        .zip(va)
                        .map(|(x, y)| if *y > 0.0 { *x } else if *y < 0.0 { -x } else { 0.0 })
                        .collect()
                })
            }
            Op::Neg(a) => self.accumulate(adj, *a, || g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => self.accumulate(adj, *a, || g.iter().map(|x| x * c).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // da = g · bᵀ, db = aᵀ · g
                self.accumulate(adj, *a, || {
                    let bt = transpose_raw(&tb.data, k, n);
                    matmul_raw(g, &bt, m, n, k)
                });
                self.accumulate(adj, *b, || {
                    let at = transpose_raw(&ta.data, m, k);
                    matmul_raw(&at, g, k, m, n)
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, || vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let t = self.value(*a);
                let (r, c) = (t.shape[0], t.shape[1]);
                self.accumulate(adj, *a, || {
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            d.push(if *axis == 0 { g[j] } else { g[i] });
                        }
                    }
                    d
                });
            }
            Op::BroadcastRows(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n.max(1)) {
                        for (o, x) in d.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    d
                });
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (r, c) = (t.shape[0], t.shape[1]);
                let w = node.value.shape[1];
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    d
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).numel();
                let c = node.value.shape[1];
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; n];
                    d[start * c..start * c + g.len()].copy_from_slice(g);
                    d
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape[0], node.value.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape[1];
                    self.accumulate(adj, *p, || {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        d
                    });
                    offset += w;
                }
            }
            Op::PermuteCols(a, perm) => {
                let c = perm.len();
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; g.len()];
                    for (grow, drow) in g.chunks(c.max(1)).zip(d.chunks_mut(c.max(1))) {
                        for (j, &p) in perm.iter().enumerate() {
                            drow[p] += grow[j];
                        }
                    }
                    d
                });
            }
            Op::Reshape(a) => self.accumulate(adj, *a, || g.to_vec()),
            Op::LogSumExpRows(a) => {
                let t = self.value(*a);
                let c = t.cols();
                self.accumulate(adj, *a, || {
                    let mut d = Vec::with_capacity(t.numel());
                    for (i, (gi, lse)) in g.iter().zip(out).enumerate() {
                        d.extend(t.row(i).iter().map(|x| gi * (x - lse).exp()));
                    }
                    debug_assert_eq!(d.len(), t.rows() * c);
                    d
                });
            }
        }
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let c = contribution();
        match adj[v.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, x)| *e += x),
            None => adj[v.0] = Some(c),
        }
    }

    /// Right-hand operand of a binary op, which may have been scalar-broadcast.
    fn accumulate_rhs(&self, adj: &mut [Option<Vec<f64>>], b: Var, full: Vec<f64>) {
        if self.value(b).is_scalar() && full.len() != 1 {
            let s: f64 = full.iter().sum();
            self.accumulate(adj, b, || vec![s]);
        } else {
            self.accumulate(adj, b, || full);
        }
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
