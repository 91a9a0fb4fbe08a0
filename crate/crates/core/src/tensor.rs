//! Dense row-major matrices and a small reverse-mode differentiation tape.
//!
//! The tape records every operation in creation order, so the node vector is
//! already a topological order and the backward pass is a single reverse
//! sweep. Only the operations the perturbation objective needs are provided.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data has {got} entries, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
        }
        write!(f, "]")
    }
}

/// Serialized as a list of rows.
impl serde::Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for r in 0..self.rows {
            seq.serialize_element(self.row(r))?;
        }
        seq.end()
    }
}

impl<'de> serde::Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softmax of a slice, stabilized by subtracting the maximum.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    RowSoftmax,
    RowLogSoftmax,
    Log,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    FrobeniusNorm,
}

/// How the right operand of an elementwise op is expanded to the left shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `rows x 1` repeated across columns.
    Column,
    /// `1 x cols` repeated across rows.
    Row,
    Scalar,
}

impl Broadcast {
    fn resolve(left: (usize, usize), right: (usize, usize)) -> Option<Self> {
        if left == right {
            Some(Self::Same)
        } else if right == (left.0, 1) {
            Some(Self::Column)
        } else if right == (1, left.1) {
            Some(Self::Row)
        } else if right == (1, 1) {
            Some(Self::Scalar)
        } else {
            None
        }
    }

    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Self::Same => r * cols + c,
            Self::Column => r,
            Self::Row => c,
            Self::Scalar => 0,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(ElementwiseOp, Broadcast, Var, Var),
    Activation(Activation, Var),
    Reduce(Reduction, Var),
    Scale(Var, f64),
    Transpose(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation for reverse-mode differentiation.
///
/// A tape is not `Sync`-shared; build one per instance and per evaluation.
#[derive(Debug, Clone, Default)]
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Entrywise `a op b`; `b` may also be a column vector, a row vector or a
    /// 1x1 scalar broadcast against `a`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (left, right) = (self.value(a), self.value(b));
        let bc = Broadcast::resolve(left.shape(), right.shape()).ok_or(TensorError::ShapeMismatch {
            op: "elementwise",
            left: left.shape(),
            right: right.shape(),
        })?;
        let (rows, cols) = left.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = left.data[r * cols + c];
                let y = right.data[bc.index(r, c, cols)];
                out.data[r * cols + c] = match op {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Sub => x - y,
                    ElementwiseOp::Mul => x * y,
                    ElementwiseOp::Div => {
                        if y == 0.0 {
                            return Err(TensorError::Domain {
                                op: "div",
                                detail: format!("zero divisor at ({r}, {c})"),
                            });
                        }
                        x / y
                    }
                };
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Elementwise(op, bc, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Div, a, b)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Softplus => x.map(softplus),
            Activation::Log => {
                if let Some(bad) = x.data.iter().find(|v| **v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive entry {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Activation::RowSoftmax => {
                let mut out = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let row = softmax(x.row(r));
                    out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&row);
                }
                out
            }
            Activation::RowLogSoftmax => {
                let mut out = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let row = x.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (c, v) in row.iter().enumerate() {
                        out.data[r * x.cols + c] = v - lse;
                    }
                }
                out
            }
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Activation(kind, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Softplus, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Log, a)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::RowSoftmax, a)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::RowLogSoftmax, a)
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Var {
        let x = self.value(a);
        let value = match kind {
            Reduction::Sum => x.sum(),
            Reduction::Mean => x.sum() / x.data.len() as f64,
            Reduction::FrobeniusNorm => x.frobenius_norm(),
        };
        let rg = self.needs(&[a]);
        self.push(Matrix::scalar(value), Op::Reduce(kind, a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        self.reduce(Reduction::FrobeniusNorm, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Clamps entries into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.needs(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Resets every stored gradient to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Propagates `d root / d node` to every ancestor of `root`.
    ///
    /// Gradients accumulate: a second call without [`Tape::zero_grad`] adds the
    /// same contribution again.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NonScalarRoot { rows, cols });
        }
        let mut adjoint: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, contribution) in self.local_gradients(idx, &g) {
                match &mut adjoint[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].grad.add_assign(&g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_gradients(&self, idx: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if wants(a) {
                    out.push((a, g.matmul(&bv.transpose()).expect("matmul grad shape")));
                }
                if wants(b) {
                    out.push((b, av.transpose().matmul(g).expect("matmul grad shape")));
                }
            }
            Op::Elementwise(op, bc, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (rows, cols) = av.shape();
                let mut ga = Matrix::zeros(rows, cols);
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let j = bc.index(r, c, cols);
                        let (x, y, up) = (av.data[i], bv.data[j], g.data[i]);
                        let (dx, dy) = match op {
                            ElementwiseOp::Add => (up, up),
                            ElementwiseOp::Sub => (up, -up),
                            ElementwiseOp::Mul => (up * y, up * x),
                            ElementwiseOp::Div => (up / y, -up * x / (y * y)),
                        };
                        ga.data[i] += dx;
                        gb.data[j] += dy;
                    }
                }
                if wants(a) {
                    out.push((a, ga));
                }
                if wants(b) {
                    out.push((b, gb));
                }
            }
            Op::Activation(kind, a) => {
                let x = self.value(a);
                let y = &node.value;
                let ga = match kind {
                    Activation::Relu => x.zip_map(g, |v, up| if v > 0.0 { up } else { 0.0 }),
                    Activation::Sigmoid => y.zip_map(g, |s, up| up * s * (1.0 - s)),
                    Activation::Softplus => x.zip_map(g, |v, up| up * sigmoid(v)),
                    Activation::Log => x.zip_map(g, |v, up| up / v),
                    Activation::RowSoftmax => {
                        let mut ga = Matrix::zeros(x.rows, x.cols);
                        for r in 0..x.rows {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..x.cols {
                                ga.data[r * x.cols + c] = yr[c] * (gr[c] - dot);
                            }
                        }
                        ga
                    }
                    Activation::RowLogSoftmax => {
                        let mut ga = Matrix::zeros(x.rows, x.cols);
                        for r in 0..x.rows {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let total: f64 = gr.iter().sum();
                            for c in 0..x.cols {
                                ga.data[r * x.cols + c] = gr[c] - yr[c].exp() * total;
                            }
                        }
                        ga
                    }
                };
                out.push((a, ga));
            }
            Op::Reduce(kind, a) => {
                let x = self.value(a);
                let up = g.data[0];
                let ga = match kind {
                    Reduction::Sum => Matrix::filled(x.rows, x.cols, up),
                    Reduction::Mean => Matrix::filled(x.rows, x.cols, up / x.data.len() as f64),
                    Reduction::FrobeniusNorm => {
                        let norm = node.value.data[0];
                        if norm == 0.0 {
                            Matrix::zeros(x.rows, x.cols)
                        } else {
                            x.map(|v| up * v / norm)
                        }
                    }
                };
                out.push((a, ga));
            }
            Op::Scale(a, factor) => out.push((a, g.map(|v| v * factor))),
            Op::Transpose(a) => out.push((a, g.transpose())),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                out.push((a, x.zip_map(g, |v, up| if v > lo && v < hi { up } else { 0.0 })));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

/// First-order optimizer state for a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn adam(params: &[Matrix]) -> Self {
        Self::new(OptimizerKind::Adam, params)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update `params -= lr * direction(grads)`.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer_step",
                left: (self.first.len(), 1),
                right: (params.len(), grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data.iter_mut().zip(&g.data) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, w) in p.data.iter_mut().enumerate() {
                        let d = g.data[k];
                        m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * d;
                        v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * d * d;
                        let m_hat = m.data[k] / c1;
                        let v_hat = v.data[k] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
