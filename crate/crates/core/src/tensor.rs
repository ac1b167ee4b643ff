//! Reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] records every forward operation together with the values it
//! produced. [`Tape::backward`] walks the record in reverse and returns the
//! [`Gradients`] of a scalar loss with respect to every node. Trainable
//! weights live in a [`ParamStore`] outside the tape; each training step binds
//! them onto a fresh tape, runs forward and backward, and folds the gradients
//! back into the store where [`AdamW`] consumes them.
//!
//! Any forward operation producing a NaN or infinity fails with
//! [`Error::NonFinite`] naming the operation.

use std::ops::Index;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// A dense matrix with an optional gradient buffer.
///
/// Tensors with a gradient buffer are trainable; the buffer always has the
/// value's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    value: Matrix,
    grad: Option<Matrix>,
}

impl Tensor {
    pub fn constant(value: Matrix) -> Self {
        Tensor { value, grad: None }
    }

    pub fn parameter(value: Matrix) -> Self {
        let grad = Some(Matrix::zeros(value.dim()));
        Tensor { value, grad }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        let value = Matrix::from_shape_vec((rows, cols), values).map_err(|_| Error::Dimension {
            op: "from_vec",
            lhs: (rows, cols),
            rhs: (len, 1),
        })?;
        Ok(Tensor::constant(value))
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Matrix {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
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

/// Lower clamp applied to predicted probabilities inside the binary
/// cross-entropy.
pub const BCE_EPSILON: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activate(Var, Activation),
    Transpose(Var),
    RowSoftmax(Var),
    ColumnMaxPool(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaskMul(Var, Matrix),
    Sum(Var),
    Mean(Var),
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Broadcast shape of the right operand of a binary op.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Broadcast::Row)
    } else {
        Err(Error::Dimension { op, lhs: a, rhs: b })
    }
}

/// Sum `g` down to the shape of a broadcast operand.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.dim() == shape {
        g.clone()
    } else if shape == (1, 1) {
        Matrix::from_elem((1, 1), g.sum())
    } else {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records `tensor` as a leaf; trainable iff the tensor has a gradient.
    pub fn tensor(&mut self, tensor: &Tensor) -> Result<Var> {
        self.leaf(tensor.value.clone(), tensor.requires_grad())
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        broadcast_kind(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).broadcast(av.dim()).expect("checked broadcast");
        let mut out = av.clone();
        Zip::from(&mut out).and(&bv).for_each(|x, &y| *x = f(*x, y));
        Ok(out)
    }

    /// Elementwise sum; `b` may also be 1×1 or a 1×cols row, broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", value, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product, broadcasting `b` like [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push("add_scalar", value, Op::AddScalar(a), rg)
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(a);
        }
        let value = self.value(a).mapv(|x| kind.apply(x));
        let rg = self.rg(a);
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => unreachable!(),
        };
        self.push(name, value, Op::Activate(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activate(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activate(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activate(a, Activation::Tanh)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push("transpose", value, Op::Transpose(a), rg)
    }

    /// Row-wise softmax with max-shift.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a), None);
        let rg = self.rg(a);
        self.push("row_softmax", value, Op::RowSoftmax(a), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero.
    ///
    /// Masked entries come out exactly 0; a row with no admissible entry is
    /// all zeros. The backward rule is the ordinary softmax rule, which
    /// already vanishes on zero outputs.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &Matrix) -> Result<Var> {
        if mask.dim() != self.shape(a) {
            return Err(Error::Dimension {
                op: "masked_row_softmax",
                lhs: self.shape(a),
                rhs: mask.dim(),
            });
        }
        let value = softmax_rows(self.value(a), Some(mask));
        let rg = self.rg(a);
        self.push("masked_row_softmax", value, Op::RowSoftmax(a), rg)
    }

    /// Per-column maximum over rows. Gradient goes to the first argmax row.
    pub fn column_max_pool(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows == 0 {
            return Err(Error::Dimension {
                op: "column_max_pool",
                lhs: (rows, cols),
                rhs: (1, cols),
            });
        }
        let av = self.value(a);
        let mut argmax = vec![0usize; cols];
        let mut value = Matrix::zeros((1, cols));
        for c in 0..cols {
            let col = av.column(c);
            let mut best = 0;
            for r in 1..rows {
                if col[r] > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            value[[0, c]] = col[best];
        }
        let rg = self.rg(a);
        self.push("column_max_pool", value, Op::ColumnMaxPool(a, argmax), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start > end || end > shape.1 {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: shape,
                rhs: (start, end),
            });
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push("slice_cols", value, Op::SliceCols(a, start), rg)
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|_| Error::Dimension {
            op: "concat_cols",
            lhs: parts.first().map(|&p| self.shape(p)).unwrap_or_default(),
            rhs: parts.last().map(|&p| self.shape(p)).unwrap_or_default(),
        })?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::Dimension {
            op: "concat_rows",
            lhs: parts.first().map(|&p| self.shape(p)).unwrap_or_default(),
            rhs: parts.last().map(|&p| self.shape(p)).unwrap_or_default(),
        })?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape.0) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: shape,
                rhs: (bad, 0),
            });
        }
        let value = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// Multiplies by a constant mask of the same shape.
    pub fn mask_mul(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        if mask.dim() != self.shape(a) {
            return Err(Error::Dimension {
                op: "mask_mul",
                lhs: self.shape(a),
                rhs: mask.dim(),
            });
        }
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push("mask_mul", value, Op::MaskMul(a, mask), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_shape_fn(self.shape(a), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        self.mask_mul(a, mask)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Matrix::from_elem((1, 1), self.value(a).sum() / n as f64);
        let rg = self.rg(a);
        self.push("mean", value, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of an N×1 probability column against labels,
    /// with predictions clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
    pub fn bce(&mut self, predicted: Var, labels: &[f64]) -> Result<Var> {
        let shape = self.shape(predicted);
        if shape.0 == 0 {
            return Err(Error::Contract("binary cross-entropy of an empty batch".into()));
        }
        if shape != (labels.len(), 1) {
            return Err(Error::Dimension {
                op: "bce",
                lhs: shape,
                rhs: (labels.len(), 1),
            });
        }
        let p = self.value(predicted).column(0);
        let value = bce_value(p.as_slice().expect("column of an N×1 matrix is contiguous"), labels);
        let rg = self.rg(predicted);
        self.push(
            "bce",
            Matrix::from_elem((1, 1), value),
            Op::Bce(predicted, labels.to_vec()),
            rg,
        )
    }

    /// Gradients of the 1×1 `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, -reduce_to(g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let bb = bv.broadcast(av.dim()).expect("checked broadcast");
                    acc(*a, g * &bb);
                }
                if self.rg(*b) {
                    acc(*b, reduce_to(&(g * av), bv.dim()));
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Activate(a, kind) => {
                let y = &node.value;
                let mut d = g.clone();
                match kind {
                    Activation::Relu => Zip::from(&mut d)
                        .and(y)
                        .for_each(|d, &y| *d = if y > 0.0 { *d } else { 0.0 }),
                    Activation::Sigmoid => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y)),
                    Activation::Tanh => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y),
                    Activation::Identity => {}
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let dots = (g * y).sum_axis(Axis(1));
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row -= dots[r];
                }
                acc(*a, d * y);
            }
            Op::ColumnMaxPool(a, argmax) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (c, &r) in argmax.iter().enumerate() {
                    d[[r, c]] = g[[0, c]];
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Matrix::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        acc(p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        acc(p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*a, d);
            }
            Op::MaskMul(a, mask) => acc(*a, g * mask),
            Op::Sum(a) => acc(*a, Matrix::from_elem(self.shape(*a), g[[0, 0]])),
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                acc(*a, Matrix::from_elem(shape, g[[0, 0]] / n));
            }
            Op::Bce(p, labels) => {
                let pv = self.value(*p);
                let n = labels.len() as f64;
                let d = Matrix::from_shape_fn(pv.dim(), |(r, _)| {
                    let y = labels[r];
                    let q = pv[[r, 0]];
                    if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&q) {
                        return 0.0;
                    }
                    g[[0, 0]] * (q - y) / (q * (1.0 - q)) / n
                });
                acc(*p, d);
            }
        }
    }
}

fn softmax_rows(a: &Matrix, mask: Option<&Matrix>) -> Matrix {
    let mut out = Matrix::zeros(a.dim());
    for r in 0..a.nrows() {
        let row = a.row(r);
        let admissible = |c: usize| mask.is_none_or(|m| m[[r, c]] != 0.0);
        let max = (0..a.ncols())
            .filter(|&c| admissible(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..a.ncols() {
            if admissible(c) {
                let e = (row[c] - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|x| x / total);
    }
    out
}

/// Mean binary cross-entropy on plain slices.
pub fn bce_value(predicted: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = predicted
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let q = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum();
    total / labels.len() as f64
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(tape.shape(v)))
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Tensor::parameter(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        let vars = self.tensors.iter().map(|t| tape.tensor(t)).collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Adds the gradients of the bound leaves into each tensor's buffer.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (tensor, &var) in self.tensors.iter_mut().zip(&binding.vars) {
            if let (Some(buf), Some(g)) = (tensor.grad.as_mut(), grads.get(var)) {
                *buf += g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces all values with those of `other`, which must have the same
    /// layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        debug_assert_eq!(self.names, other.names);
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.value.assign(&src.value);
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.first.is_empty() {
            self.first = params.tensors.iter().map(|t| Matrix::zeros(t.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.epsilon,
        );
        for ((tensor, m), v) in params.tensors.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = tensor.grad.as_mut() else { continue };
            Zip::from(&mut tensor.value)
                .and(&mut *g)
                .and(m)
                .and(v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * *g;
                    *v = b2 * *v + (1.0 - b2) * *g * *g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                    *g = 0.0;
                });
        }
    }
}

/// Glorot-uniform initialization for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval1(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: Matrix) -> Matrix {
        let mut tape = Tape::new();
        let v = tape.leaf(x, true).unwrap();
        let y = f(&mut tape, v).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn matmul_examples() {
        let id = array![[1.0, 0.0], [0.0, 1.0]];
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let mut tape = Tape::new();
        let a = tape.constant(id).unwrap();
        let b = tape.constant(m.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m);

        let a = tape.constant(array![[1.0, 2.0]]).unwrap();
        let b = tape.constant(array![[3.0], [4.0]]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &array![[11.0]]);

        let z = tape.constant(Matrix::zeros((2, 3))).unwrap();
        let k = tape.constant(Matrix::from_elem((3, 4), 7.5)).unwrap();
        let c = tape.matmul(z, k).unwrap();
        assert_eq!(tape.value(c), &Matrix::zeros((2, 4)));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros((2, 3))).unwrap();
        let b = tape.constant(Matrix::zeros((2, 3))).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { op: "matmul", .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0]]).unwrap();
        let z = tape.constant(array![[0.0, 0.0]]).unwrap();
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), &array![[1.0, 2.0]]);

        let a = tape.constant(array![[2.0, 3.0]]).unwrap();
        let b = tape.constant(array![[4.0, 5.0]]).unwrap();
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(p), &array![[8.0, 15.0]]);

        let x = array![[0.3, -1.2], [4.0, 9.5]];
        let xv = tape.constant(x.clone()).unwrap();
        let ones = tape.constant(Matrix::ones((2, 2))).unwrap();
        let p = tape.mul(xv, ones).unwrap();
        assert_eq!(tape.value(p), &x);

        let bad = tape.constant(Matrix::ones((3, 2))).unwrap();
        assert!(tape.add(xv, bad).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(eval1(|t, v| t.relu(v), array![[-1.0, 2.0]]), array![[0.0, 2.0]]);
        assert_eq!(eval1(|t, v| t.sigmoid(v), array![[0.0]]), array![[0.5]]);
        let s = eval1(|t, v| t.sigmoid(v), array![[-6.0]])[[0, 0]];
        assert!((s - 1.0 / (1.0 + 6f64.exp())).abs() < 1e-15);
        assert!((s - 0.002_472_623).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(eval1(|t, v| t.row_softmax(v), array![[0.0, 0.0]]), array![[0.5, 0.5]]);
        assert_eq!(
            eval1(|t, v| t.row_softmax(v), array![[1000.0, 1000.0]]),
            array![[0.5, 0.5]]
        );
        let y = eval1(|t, v| t.row_softmax(v), array![[1f64.ln(), 3f64.ln()]]);
        assert!((y[[0, 0]] - 0.25).abs() < 1e-15 && (y[[0, 1]] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mask = array![[0.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let mut tape = Tape::new();
        let x = tape.leaf(array![[5.0, 1.0, 1.0], [1.0, 2.0, 3.0]], true).unwrap();
        let y = tape.masked_row_softmax(x, &mask).unwrap();
        assert_eq!(tape.value(y), &array![[0.0, 0.5, 0.5], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn max_pool_examples_and_tie_rule() {
        assert_eq!(
            eval1(|t, v| t.column_max_pool(v), array![[1.0, 5.0], [3.0, 2.0]]),
            array![[3.0, 5.0]]
        );
        assert_eq!(
            eval1(|t, v| t.column_max_pool(v), array![[7.0, 8.0]]),
            array![[7.0, 8.0]]
        );

        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_elem((2, 2), 2.0), true).unwrap();
        let p = tape.column_max_pool(x).unwrap();
        assert_eq!(tape.value(p), &array![[2.0, 2.0]]);
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 1.0], [0.0, 0.0]]);

        let e = tape.constant(Matrix::zeros((0, 2))).unwrap();
        assert!(matches!(tape.column_max_pool(e), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [0.5, 3.0]], true).unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::ones((2, 2)));

        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[6.0]]);
    }

    #[test]
    fn backward_accumulates_reuse_and_zeroes_unreachable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_elem((2, 3), 0.7), true).unwrap();
        let unused = tape.leaf(Matrix::ones((1, 4)), true).unwrap();
        let a = tape.sum(x).unwrap();
        let b = tape.sum(x).unwrap();
        let l = tape.add(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::from_elem((2, 3), 2.0));
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(&tape, unused), Matrix::zeros((1, 4)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::ones((2, 2)), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1e300]], true).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
        assert!(tape.leaf(array![[f64::NAN]], false).is_err());
    }

    #[test]
    fn bce_examples() {
        let v = bce_value(&[1.0 - 1e-12], &[1.0]);
        assert!(v.abs() < 1e-11);
        assert!((bce_value(&[0.5, 0.5], &[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_value(&[0.9], &[0.0]) - std::f64::consts::LN_10).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(Matrix::zeros((0, 1))).unwrap();
        assert!(matches!(tape.bce(p, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::ones((1, 100_000)), true).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).mean().unwrap();
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
    }

    fn single_param(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[value]]);
        (store, id)
    }

    #[test]
    fn optimizer_fixed_point_and_descent() {
        let (mut store, id) = single_param(1.7);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store);
        assert_eq!(store.get(id).value()[[0, 0]], 1.7);

        let (mut store, id) = single_param(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let sq = tape.mul(b[id], b[id]).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        store.accumulate(&b, &g);
        assert_eq!(store.get(id).grad().unwrap()[[0, 0]], 2.0);
        opt.step(&mut store);
        let w = store.get(id).value()[[0, 0]];
        assert!(w.abs() < 1.0);
        assert_eq!(store.get(id).grad().unwrap()[[0, 0]], 0.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn optimizer_decoupled_weight_decay() {
        let (mut store, id) = single_param(2.0);
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut store);
        let expected = 2.0 - 0.1 * 0.01 * 2.0;
        assert!((store.get(id).value()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn optimizer_zero_learning_rate_is_identity() {
        let (mut store, id) = single_param(-0.4);
        store.get_mut(id).grad.as_mut().unwrap()[[0, 0]] = 3.0;
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut store);
        assert_eq!(store.get(id).value()[[0, 0]], -0.4);
    }
}
