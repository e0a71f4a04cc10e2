//! Dense double-precision tensors with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation as a node whose index is its output id.
//! Inputs always precede their consumers, so a single reverse sweep over the
//! node list propagates gradients. Leaves created with [`Graph::param`] receive
//! a gradient buffer after [`Graph::backward`]; leaves created with
//! [`Graph::constant`] do not.
//!
//! Ops treat tensors as row-major matrices. A rank-1 tensor of length `n` is
//! read as a `1 × n` row.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Matrix view: all leading dimensions fold into rows.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn as_matrix(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `b` is a `1 × n` row added to every row of `a`, or a single value added everywhere.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogSoftmax(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Sum(Var),
    /// Zero-padded sliding windows of a column vector: `[n, 1] -> [n, width]`.
    Unfold(Var, usize),
    /// Scalar with externally supplied partial derivatives, one buffer per input.
    External(Vec<Var>, Vec<Vec<f64>>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Unfold(..) => "unfold",
            Op::External(..) => "external",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBroadcast(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::LogSoftmax(a)
            | Op::Softmax(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, ..)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Unfold(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::External(v, _) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Read-only record of one tape entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    /// Trainable leaf; receives a gradient buffer on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient of the last backward pass, for leaves created with [`Graph::param`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&op.inputs());
        self.push(value, op, rg)
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `[m, k] × [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 || self.shape(b).len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut out = vec![0.0; m * n];
        matmul_into(ad, bd, &mut out, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
            grad: None,
        };
        Ok(self.record(value, Op::MatMul(a, b)))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor {
            shape: x.shape.clone(),
            data,
            grad: None,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.record(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.record(t, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.record(t, Op::Mul(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a` (`m × n`), or a one-element tensor to every entry.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.mat(a);
        let bv = &self.nodes[b.0].value;
        let x = &self.nodes[a.0].value;
        let data: Vec<f64> = if bv.numel() == 1 {
            let s = bv.data[0];
            x.data.iter().map(|v| v + s).collect()
        } else if bv.rows() == 1 && bv.cols() == n {
            x.data
                .iter()
                .enumerate()
                .map(|(i, v)| v + bv.data[i % n])
                .collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                left: x.shape.clone(),
                right: bv.shape.clone(),
            });
        };
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            grad: None,
        };
        Ok(self.record(value, Op::AddBroadcast(a, b)))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        };
        self.record(value, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.cols();
        let mut data = x.data.clone();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            grad: None,
        };
        self.record(value, Op::LogSoftmax(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.cols();
        let mut data = x.data.clone();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            grad: None,
        };
        self.record(value, Op::Softmax(a))
    }

    /// `[m, n_i]...` -> `[m, Σ n_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.mat(parts[0]).0;
        for &p in &parts[1..] {
            if self.mat(p).0 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.mat(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let value = Tensor {
            shape: vec![m, total],
            data,
            grad: None,
        };
        Ok(self.record(value, Op::ConcatCols(parts.to_vec())))
    }

    /// `[m_i, n]...` -> `[Σ m_i, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.mat(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.mat(p);
            if c != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let value = Tensor {
            shape: vec![rows, n],
            data,
            grad: None,
        };
        Ok(self.record(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Row lookup: embedding tables, frame selection for subsampling.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a);
        let x = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(x.row_slice(i));
        }
        if idx.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, n],
                reason: "gather_rows needs at least one index".into(),
            });
        }
        let value = Tensor {
            shape: vec![idx.len(), n],
            data,
            grad: None,
        };
        Ok(self.record(value, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(a);
        if len == 0 || start + len > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let x = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let value = Tensor {
            shape: vec![m, len],
            data,
            grad: None,
        };
        Ok(self.record(value, Op::SliceCols(a, start, len)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.mat(a);
        let x = &self.nodes[a.0].value;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = x.data[r * n + c];
            }
        }
        let value = Tensor {
            shape: vec![n, m],
            data,
            grad: None,
        };
        self.record(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sliding windows over a column vector `[n, 1]` (or row `[1, n]`), zero padded,
    /// centred: output row `i` holds `x[i - width/2 .. i - width/2 + width]`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (m, c) = x.as_matrix();
        if (m != 1 && c != 1) || width == 0 {
            return Err(TensorError::InvalidShape {
                shape: x.shape.clone(),
                reason: "unfold expects a vector and a positive width".into(),
            });
        }
        let n = m.max(c);
        let half = width / 2;
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            for k in 0..width {
                let src = i as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < n {
                    data[i * width + k] = x.data[src as usize];
                }
            }
        }
        let value = Tensor {
            shape: vec![n, width],
            data,
            grad: None,
        };
        Ok(self.record(value, Op::Unfold(a, width)))
    }

    /// Records a scalar whose partial derivatives were computed outside the tape
    /// (for example by a dynamic-programming loss).
    pub fn external_scalar(&mut self, value: f64, inputs: &[Var], partials: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(TensorError::InvalidShape {
                shape: vec![partials.len()],
                reason: format!("{} inputs but {} partial buffers", inputs.len(), partials.len()),
            });
        }
        for (v, p) in inputs.iter().zip(&partials) {
            if self.nodes[v.0].value.numel() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "external",
                    left: self.shape(*v).to_vec(),
                    right: vec![p.len()],
                });
            }
        }
        Ok(self.record(Tensor::scalar(value), Op::External(inputs.to_vec(), partials)))
    }

    /// Reverse sweep from a scalar loss. Parameter leaves receive `∂loss/∂leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Clears gradient buffers so the graph can be differentiated again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).as_matrix();
                let n = val(b).cols();
                if wants(a) {
                    // dA = G · Bᵀ
                    let bd = &val(b).data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &mut da[r * k..(r + 1) * k];
                            for (j, d) in row.iter_mut().enumerate() {
                                *d += gv * bd[j * n + c];
                            }
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let ad = &val(a).data;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for j in 0..k {
                            let av = ad[r * k + j];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * n..(j + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g);
                }
                if wants(b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddBroadcast(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g);
                }
                if wants(b) {
                    let bn = val(b).numel();
                    let mut db = vec![0.0; bn];
                    if bn == 1 {
                        db[0] = g.iter().sum();
                    } else {
                        for (idx, gv) in g.iter().enumerate() {
                            db[idx % bn] += gv;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(&val(b).data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(&val(a).data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(&out.data).map(|(gv, y)| gv * y).collect();
                accumulate(grads, *a, &d);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..n {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, *p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        accumulate(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols();
                let d = grads[a.0].get_or_insert_with(|| vec![0.0; val(a).numel()]);
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d[i * n..(i + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                        *dv += gv;
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                let n = val(a).cols();
                let m = out.rows();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, *a, &d);
            }
            Op::Transpose(a) => {
                let (m, n) = val(a).as_matrix();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = g[c * m + r];
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(a).numel()];
                accumulate(grads, *a, &d);
            }
            Op::Unfold(a, width) => {
                let n = val(a).numel();
                let half = width / 2;
                let mut d = vec![0.0; n];
                for i in 0..n {
                    for k in 0..*width {
                        let src = i as isize + k as isize - half as isize;
                        if src >= 0 && (src as usize) < n {
                            d[src as usize] += g[i * width + k];
                        }
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::External(inputs, partials) => {
                for (v, p) in inputs.iter().zip(partials) {
                    if wants(v) {
                        let d: Vec<f64> = p.iter().map(|x| x * g[0]).collect();
                        accumulate(grads, *v, &d);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..k {
            let av = a[r * k + j];
            if av == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
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

/// Stable `log Σ exp(x_i)`; `-∞` for an empty or all `-∞` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Stable `log(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_is_componentwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(a);
        assert_eq!(g.scalar_value(s), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = g
            .constant(Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap());
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p).data(), g.value(a).data());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_product_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let x = g.constant(Tensor::scalar(1.0));
        let p = g.mul(w, x).unwrap();
        let s = g.sigmoid(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(
            g.backward(x),
            Err(TensorError::NonScalarLoss(vec![1, 2]))
        );
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1000.0, 0.0, -5.0, 0.1, 0.2, 0.3]).unwrap());
        let y = g.log_softmax(x);
        for r in 0..2 {
            assert!(log_sum_exp(g.value(y).row_slice(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_centres_windows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let u = g.unfold(x, 3).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
        );
    }

    #[test]
    fn tape_records_are_topological() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![0.5, -0.5]));
        let b = g.tanh(a);
        let c = g.mul(a, b).unwrap();
        let _ = g.sum(c);
        for r in g.records() {
            assert!(r.inputs.iter().all(|i| i.index() < r.output.index()));
        }
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
