use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, add_assign, matmul, matmul_at, matmul_bt, sigmoid, silu, silu_grad, softplus};
use super::tensor::{dims2, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Numeric precision of recorded values. `Single` rounds every op output to
/// the nearest `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    /// Relative-error tolerance a gradient check can expect at this precision.
    pub fn gradcheck_tolerance(self) -> f64 {
        match self {
            Precision::Double => 1e-5,
            Precision::Single => 1e-3,
        }
    }
}

/// Built-in op kinds and their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Transpose,
    /// Elementwise; the second operand may broadcast as a scalar, a row or a column.
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Tanh,
    Silu,
    Exp,
    Log,
    Softplus,
    SoftmaxRows,
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    GatherRows(Vec<usize>),
    Reshape(Vec<usize>),
    MeanRows,
    MaxRows,
    Sum,
    Index(usize),
    /// Zero-padded convolution along rows: inputs `x: n×c_in`,
    /// `w: (width·c_in)×c_out` (tap-major), `b: c_out`.
    Conv1dSame { width: usize },
    /// Per-channel causal convolution: inputs `x: n×c`, `w: width×c`, `b: c`.
    CausalDepthwiseConv { width: usize },
    /// Inverted dropout with a mask drawn from `seed`.
    Dropout { rate: f64, seed: u64 },
    /// Affine-free per-row normalization.
    LayerNormRows { eps: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Silu => "silu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::SoftmaxRows => "softmax_rows",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::MeanRows => "mean_rows",
            Op::MaxRows => "max_rows",
            Op::Sum => "sum",
            Op::Index(_) => "index",
            Op::Conv1dSame { .. } => "conv1d_same",
            Op::CausalDepthwiseConv { .. } => "causal_depthwise_conv",
            Op::Dropout { .. } => "dropout",
            Op::LayerNormRows { .. } => "layer_norm_rows",
        }
    }
}

/// Borrowed input to an op: shape plus flat values.
#[derive(Clone, Copy)]
pub struct Operand<'a> {
    pub shape: &'a [usize],
    pub values: &'a [f64],
}

impl Operand<'_> {
    pub fn dims2(&self) -> (usize, usize) {
        dims2(self.shape)
    }
}

/// A differentiable operation defined outside the built-in op set.
///
/// `forward` may keep whatever context `backward` needs. `backward` returns
/// one gradient per input (same length as that input), or `None` for inputs
/// that receive no gradient.
pub trait Function {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[Operand<'_>]) -> Result<Tensor>;
    fn backward(&self, inputs: &[Operand<'_>], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Saved {
    Nothing,
    Indices(Vec<usize>),
    Mask(Vec<f64>),
    Columns(Vec<f64>),
    InvStd(Vec<f64>),
}

enum Kind {
    Leaf,
    Builtin(Op, Saved),
    Custom(Box<dyn Function>),
}

struct Node {
    value: Tensor,
    kind: Kind,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node `k` only references inputs with ids `< k`, so append order is a
/// valid topological order for the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("precision", &self.precision)
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; panics if `v` was not a leaf requiring gradients.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for this variable")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Only leaves created with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.round(&mut value);
        self.push(value, Kind::Leaf, Vec::new(), requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, kind: Kind, inputs: Vec<Var>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            kind,
            inputs,
            requires_grad,
        });
        Var(id)
    }

    fn round(&self, t: &mut Tensor) {
        if self.precision == Precision::Single {
            for v in t.values_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn operand(&self, v: Var) -> Operand<'_> {
        let t = &self.nodes[v.0].value;
        Operand {
            shape: t.shape(),
            values: t.values(),
        }
    }

    /// Records a built-in op.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (mut value, saved) = {
            let ops: Vec<Operand<'_>> = inputs.iter().map(|&v| self.operand(v)).collect();
            forward(&op, &ops)?
        };
        self.round(&mut value);
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Kind::Builtin(op, saved), inputs.to_vec(), requires_grad))
    }

    /// Records a user-defined op.
    pub fn apply_fn<F: Function + 'static>(&mut self, mut f: F, inputs: &[Var]) -> Result<Var> {
        let mut value = {
            let ops: Vec<Operand<'_>> = inputs.iter().map(|&v| self.operand(v)).collect();
            f.forward(&ops)?
        };
        self.round(&mut value);
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Kind::Custom(Box::new(f)), inputs.to_vec(), requires_grad))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires gradients
    /// gets an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            pending[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let input_grads = match &node.kind {
                Kind::Leaf => {
                    out[id] = Some(Tensor::new(node.value.shape(), grad)?);
                    continue;
                }
                Kind::Builtin(op, saved) => {
                    let ops: Vec<Operand<'_>> = node.inputs.iter().map(|&v| self.operand(v)).collect();
                    backward(op, saved, &ops, node.value.values(), &grad)
                }
                Kind::Custom(f) => {
                    let ops: Vec<Operand<'_>> = node.inputs.iter().map(|&v| self.operand(v)).collect();
                    f.backward(&ops, node.value.values(), &grad)
                }
            };
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => add_assign(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, Kind::Leaf) && node.requires_grad && out[id].is_none() {
                out[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[a])
    }
    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Silu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatCols, parts)
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceCols { start, end }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.apply(Op::GatherRows(index), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape(shape.into()), &[a])
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanRows, &[a])
    }
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MaxRows, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.apply(Op::Index(i), &[a])
    }
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        self.apply(Op::Conv1dSame { width }, &[x, w, b])
    }
    pub fn causal_depthwise_conv(&mut self, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        self.apply(Op::CausalDepthwiseConv { width }, &[x, w, b])
    }
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        self.apply(Op::Dropout { rate, seed }, &[a])
    }
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNormRows { eps }, &[a])
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn broadcast_kind(op: &Op, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if numel(b) == 1 {
        return Ok(Bcast::Scalar);
    }
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    if a.len() <= 2 && b.len() <= 2 {
        if br == 1 && bc == ac {
            return Ok(Bcast::Row);
        }
        if bc == 1 && br == ar {
            return Ok(Bcast::Col);
        }
        if (ar, ac) == (br, bc) {
            return Ok(Bcast::Same);
        }
    }
    Err(Error::shape(op.name(), &[a, b], "second operand does not broadcast to the first"))
}

#[inline]
fn bidx(kind: Bcast, i: usize, j: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i * cols + j,
        Bcast::Scalar => 0,
        Bcast::Row => j,
        Bcast::Col => i,
    }
}

fn unary(x: &Operand<'_>, f: impl Fn(f64) -> f64) -> Tensor {
    let values = x.values.iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape, values).expect("shape preserved")
}

fn require_rank2(op: &Op, x: &Operand<'_>) -> Result<()> {
    if x.shape.len() > 2 {
        return Err(Error::shape(op.name(), &[x.shape], "expected rank ≤ 2"));
    }
    Ok(())
}

fn expect_inputs(op: &Op, inputs: &[Operand<'_>], n: usize) -> Result<()> {
    if inputs.len() != n {
        let shapes: Vec<&[usize]> = inputs.iter().map(|o| o.shape).collect();
        return Err(Error::shape(op.name(), &shapes, format!("expected {n} inputs")));
    }
    Ok(())
}

fn forward(op: &Op, x: &[Operand<'_>]) -> Result<(Tensor, Saved)> {
    let arity = match op {
        Op::MatMul | Op::Add | Op::Sub | Op::Mul => 2,
        Op::Conv1dSame { .. } | Op::CausalDepthwiseConv { .. } => 3,
        Op::ConcatRows | Op::ConcatCols => x.len().max(1),
        _ => 1,
    };
    expect_inputs(op, x, arity)?;
    let nothing = Saved::Nothing;
    let out = match op {
        Op::MatMul => {
            require_rank2(op, &x[0])?;
            require_rank2(op, &x[1])?;
            let (m, k) = x[0].dims2();
            let (k2, n) = x[1].dims2();
            if k != k2 {
                return Err(Error::shape(op.name(), &[x[0].shape, x[1].shape], "inner dimensions differ"));
            }
            (Tensor::new([m, n], matmul(x[0].values, x[1].values, m, k, n))?, nothing)
        }
        Op::Transpose => {
            require_rank2(op, &x[0])?;
            let (r, c) = x[0].dims2();
            (Tensor::new([c, r], kernels::transpose(x[0].values, r, c))?, nothing)
        }
        Op::Add | Op::Sub | Op::Mul => {
            let kind = broadcast_kind(op, x[0].shape, x[1].shape)?;
            let (r, c) = x[0].dims2();
            let (a, b) = (x[0].values, x[1].values);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let av = a[i * c + j];
                    let bv = b[bidx(kind, i, j, c)];
                    out[i * c + j] = match op {
                        Op::Add => av + bv,
                        Op::Sub => av - bv,
                        _ => av * bv,
                    };
                }
            }
            (Tensor::new(x[0].shape, out)?, nothing)
        }
        Op::Scale(s) => (unary(&x[0], |v| v * s), nothing),
        Op::AddScalar(s) => (unary(&x[0], |v| v + s), nothing),
        Op::Sigmoid => (unary(&x[0], sigmoid), nothing),
        Op::Tanh => (unary(&x[0], f64::tanh), nothing),
        Op::Silu => (unary(&x[0], silu), nothing),
        Op::Exp => (unary(&x[0], f64::exp), nothing),
        Op::Log => (unary(&x[0], f64::ln), nothing),
        Op::Softplus => (unary(&x[0], softplus), nothing),
        Op::SoftmaxRows => {
            let (_, c) = x[0].dims2();
            let mut out = x[0].values.to_vec();
            for row in out.chunks_mut(c) {
                kernels::softmax_in_place(row);
            }
            (Tensor::new(x[0].shape, out)?, nothing)
        }
        Op::ConcatRows => {
            let c = x[0].dims2().1;
            if x.iter().any(|o| o.dims2().1 != c || o.shape.len() > 2) {
                let shapes: Vec<&[usize]> = x.iter().map(|o| o.shape).collect();
                return Err(Error::shape(op.name(), &shapes, "column counts differ"));
            }
            let rows: usize = x.iter().map(|o| o.dims2().0).sum();
            let values = x.iter().flat_map(|o| o.values.iter().copied()).collect();
            (Tensor::new([rows, c], values)?, nothing)
        }
        Op::ConcatCols => {
            let r = x[0].dims2().0;
            if x.iter().any(|o| o.dims2().0 != r || o.shape.len() > 2) {
                let shapes: Vec<&[usize]> = x.iter().map(|o| o.shape).collect();
                return Err(Error::shape(op.name(), &shapes, "row counts differ"));
            }
            let cols: usize = x.iter().map(|o| o.dims2().1).sum();
            let mut values = Vec::with_capacity(r * cols);
            for i in 0..r {
                for o in x {
                    let c = o.dims2().1;
                    values.extend_from_slice(&o.values[i * c..(i + 1) * c]);
                }
            }
            (Tensor::new([r, cols], values)?, nothing)
        }
        Op::SliceRows { start, end } => {
            let (r, c) = x[0].dims2();
            if start >= end || *end > r {
                return Err(Error::shape(op.name(), &[x[0].shape], format!("rows {start}..{end} out of range")));
            }
            (Tensor::new([end - start, c], x[0].values[start * c..end * c].to_vec())?, nothing)
        }
        Op::SliceCols { start, end } => {
            let (r, c) = x[0].dims2();
            if start >= end || *end > c {
                return Err(Error::shape(op.name(), &[x[0].shape], format!("cols {start}..{end} out of range")));
            }
            let w = end - start;
            let mut values = Vec::with_capacity(r * w);
            for i in 0..r {
                values.extend_from_slice(&x[0].values[i * c + start..i * c + end]);
            }
            (Tensor::new([r, w], values)?, nothing)
        }
        Op::GatherRows(index) => {
            let (r, c) = x[0].dims2();
            if index.is_empty() || index.iter().any(|&i| i >= r) {
                return Err(Error::shape(op.name(), &[x[0].shape], "empty or out-of-range row index"));
            }
            let mut values = Vec::with_capacity(index.len() * c);
            for &i in index {
                values.extend_from_slice(&x[0].values[i * c..(i + 1) * c]);
            }
            (Tensor::new([index.len(), c], values)?, nothing)
        }
        Op::Reshape(shape) => {
            if numel(shape) != x[0].values.len() {
                return Err(Error::shape(op.name(), &[x[0].shape, shape], "element counts differ"));
            }
            (Tensor::new(shape.clone(), x[0].values.to_vec())?, nothing)
        }
        Op::MeanRows => {
            let (r, c) = x[0].dims2();
            let mut out = vec![0.0; c];
            for row in x[0].values.chunks(c) {
                add_assign(&mut out, row);
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            (Tensor::new([1, c], out)?, nothing)
        }
        Op::MaxRows => {
            let (r, c) = x[0].dims2();
            let mut out = vec![f64::NEG_INFINITY; c];
            let mut arg = vec![0usize; c];
            for i in 0..r {
                for j in 0..c {
                    let v = x[0].values[i * c + j];
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = i;
                    }
                }
            }
            (Tensor::new([1, c], out)?, Saved::Indices(arg))
        }
        Op::Sum => (Tensor::scalar(x[0].values.iter().sum()), nothing),
        Op::Index(i) => {
            if *i >= x[0].values.len() {
                return Err(Error::shape(op.name(), &[x[0].shape], format!("index {i} out of range")));
            }
            (Tensor::scalar(x[0].values[*i]), nothing)
        }
        Op::Conv1dSame { width } => {
            let (n, cin) = x[0].dims2();
            let (wr, cout) = x[1].dims2();
            if width % 2 == 0 || wr != width * cin || numel(x[2].shape) != cout {
                return Err(Error::shape(
                    op.name(),
                    &[x[0].shape, x[1].shape, x[2].shape],
                    format!("kernel must be (width·c_in)×c_out with odd width {width}"),
                ));
            }
            let cols = im2col(x[0].values, n, cin, *width);
            let mut out = matmul(&cols, x[1].values, n, width * cin, cout);
            for row in out.chunks_mut(cout) {
                add_assign(row, x[2].values);
            }
            (Tensor::new([n, cout], out)?, Saved::Columns(cols))
        }
        Op::CausalDepthwiseConv { width } => {
            let (n, c) = x[0].dims2();
            let (wr, wc) = x[1].dims2();
            if wr != *width || wc != c || numel(x[2].shape) != c {
                return Err(Error::shape(
                    op.name(),
                    &[x[0].shape, x[1].shape, x[2].shape],
                    "kernel must be width×c with a c-vector bias",
                ));
            }
            let (xs, w, b) = (x[0].values, x[1].values, x[2].values);
            let mut out = vec![0.0; n * c];
            for t in 0..n {
                for ch in 0..c {
                    let mut acc = b[ch];
                    for k in 0..*width {
                        let src = t as isize - (*width as isize - 1) + k as isize;
                        if src >= 0 {
                            acc += w[k * c + ch] * xs[src as usize * c + ch];
                        }
                    }
                    out[t * c + ch] = acc;
                }
            }
            (Tensor::new([n, c], out)?, nothing)
        }
        Op::Dropout { rate, seed } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::shape(op.name(), &[x[0].shape], format!("rate {rate} outside [0, 1)")));
            }
            let keep = 1.0 - rate;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mask: Vec<f64> = (0..x[0].values.len())
                .map(|_| if *rate == 0.0 || rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let values = x[0].values.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(x[0].shape, values)?, Saved::Mask(mask))
        }
        Op::LayerNormRows { eps } => {
            let (_, c) = x[0].dims2();
            let mut out = x[0].values.to_vec();
            let mut inv = Vec::new();
            for row in out.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * s);
                inv.push(s);
            }
            (Tensor::new(x[0].shape, out)?, Saved::InvStd(inv))
        }
    };
    Ok(out)
}

fn im2col(x: &[f64], n: usize, cin: usize, width: usize) -> Vec<f64> {
    let pad = (width - 1) / 2;
    let mut cols = vec![0.0; n * width * cin];
    for t in 0..n {
        for k in 0..width {
            let src = t as isize + k as isize - pad as isize;
            if src < 0 || src as usize >= n {
                continue;
            }
            let dst = t * width * cin + k * cin;
            cols[dst..dst + cin].copy_from_slice(&x[src as usize * cin..(src as usize + 1) * cin]);
        }
    }
    cols
}

fn reduce_broadcast(kind: Bcast, g: &[f64], r: usize, c: usize, b_len: usize) -> Vec<f64> {
    match kind {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; c];
            for row in g.chunks(c) {
                add_assign(&mut out, row);
            }
            out
        }
        Bcast::Col => {
            debug_assert_eq!(b_len, r);
            g.chunks(c).map(|row| row.iter().sum()).collect()
        }
    }
}

fn backward(op: &Op, saved: &Saved, x: &[Operand<'_>], y: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::MatMul => {
            let (m, k) = x[0].dims2();
            let (_, n) = x[1].dims2();
            let da = matmul_bt(g, x[1].values, m, n, k);
            let db = matmul_at(x[0].values, g, m, k, n);
            vec![Some(da), Some(db)]
        }
        Op::Transpose => {
            let (r, c) = x[0].dims2();
            vec![Some(kernels::transpose(g, c, r))]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let kind = broadcast_kind(op, x[0].shape, x[1].shape).expect("validated in forward");
            let (r, c) = x[0].dims2();
            let blen = x[1].values.len();
            match op {
                Op::Add => vec![Some(g.to_vec()), Some(reduce_broadcast(kind, g, r, c, blen))],
                Op::Sub => {
                    let mut db = reduce_broadcast(kind, g, r, c, blen);
                    db.iter_mut().for_each(|v| *v = -*v);
                    vec![Some(g.to_vec()), Some(db)]
                }
                _ => {
                    let (a, b) = (x[0].values, x[1].values);
                    let mut da = vec![0.0; r * c];
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let idx = i * c + j;
                            da[idx] = g[idx] * b[bidx(kind, i, j, c)];
                            gb[idx] = g[idx] * a[idx];
                        }
                    }
                    vec![Some(da), Some(reduce_broadcast(kind, &gb, r, c, blen))]
                }
            }
        }
        Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Op::AddScalar(_) => vec![Some(g.to_vec())],
        Op::Sigmoid => vec![Some(y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect())],
        Op::Tanh => vec![Some(y.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect())],
        Op::Silu => vec![Some(x[0].values.iter().zip(g).map(|(&x, g)| g * silu_grad(x)).collect())],
        Op::Exp => vec![Some(y.iter().zip(g).map(|(y, g)| g * y).collect())],
        Op::Log => vec![Some(x[0].values.iter().zip(g).map(|(x, g)| g / x).collect())],
        Op::Softplus => vec![Some(x[0].values.iter().zip(g).map(|(&x, g)| g * sigmoid(x)).collect())],
        Op::SoftmaxRows => {
            let (_, c) = x[0].dims2();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let inner = kernels::dot(yr, gr);
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - inner);
                }
            }
            vec![Some(dx)]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            x.iter()
                .map(|o| {
                    let len = o.values.len();
                    let part = g[offset..offset + len].to_vec();
                    offset += len;
                    Some(part)
                })
                .collect()
        }
        Op::ConcatCols => {
            let total: usize = x.iter().map(|o| o.dims2().1).sum();
            let mut col = 0;
            x.iter()
                .map(|o| {
                    let (r, c) = o.dims2();
                    let mut part = Vec::with_capacity(r * c);
                    for i in 0..r {
                        part.extend_from_slice(&g[i * total + col..i * total + col + c]);
                    }
                    col += c;
                    Some(part)
                })
                .collect()
        }
        Op::SliceRows { start, .. } => {
            let (_, c) = x[0].dims2();
            let mut dx = vec![0.0; x[0].values.len()];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            vec![Some(dx)]
        }
        Op::SliceCols { start, end } => {
            let (r, c) = x[0].dims2();
            let w = end - start;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(dx)]
        }
        Op::GatherRows(index) => {
            let (_, c) = x[0].dims2();
            let mut dx = vec![0.0; x[0].values.len()];
            for (k, &i) in index.iter().enumerate() {
                add_assign(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
            }
            vec![Some(dx)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::MeanRows => {
            let (r, c) = x[0].dims2();
            let mut dx = Vec::with_capacity(r * c);
            for _ in 0..r {
                dx.extend(g.iter().map(|v| v / r as f64));
            }
            vec![Some(dx)]
        }
        Op::MaxRows => {
            let Saved::Indices(arg) = saved else { unreachable!() };
            let (_, c) = x[0].dims2();
            let mut dx = vec![0.0; x[0].values.len()];
            for (j, &i) in arg.iter().enumerate() {
                dx[i * c + j] = g[j];
            }
            vec![Some(dx)]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].values.len()])],
        Op::Index(i) => {
            let mut dx = vec![0.0; x[0].values.len()];
            dx[*i] = g[0];
            vec![Some(dx)]
        }
        Op::Conv1dSame { width } => {
            let Saved::Columns(cols) = saved else { unreachable!() };
            let (n, cin) = x[0].dims2();
            let (_, cout) = x[1].dims2();
            let kdim = width * cin;
            let dw = matmul_at(cols, g, n, kdim, cout);
            let dcols = matmul_bt(g, x[1].values, n, cout, kdim);
            let pad = (width - 1) / 2;
            let mut dx = vec![0.0; n * cin];
            for t in 0..n {
                for k in 0..*width {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    let s = src as usize;
                    let from = t * kdim + k * cin;
                    add_assign(&mut dx[s * cin..(s + 1) * cin], &dcols[from..from + cin]);
                }
            }
            let mut db = vec![0.0; cout];
            for row in g.chunks(cout) {
                add_assign(&mut db, row);
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::CausalDepthwiseConv { width } => {
            let (n, c) = x[0].dims2();
            let (xs, w) = (x[0].values, x[1].values);
            let mut dx = vec![0.0; n * c];
            let mut dw = vec![0.0; width * c];
            let mut db = vec![0.0; c];
            for t in 0..n {
                for ch in 0..c {
                    let gv = g[t * c + ch];
                    db[ch] += gv;
                    for k in 0..*width {
                        let src = t as isize - (*width as isize - 1) + k as isize;
                        if src >= 0 {
                            let s = src as usize;
                            dw[k * c + ch] += gv * xs[s * c + ch];
                            dx[s * c + ch] += gv * w[k * c + ch];
                        }
                    }
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::Dropout { .. } => {
            let Saved::Mask(mask) = saved else { unreachable!() };
            vec![Some(g.iter().zip(mask).map(|(g, m)| g * m).collect())]
        }
        Op::LayerNormRows { .. } => {
            let Saved::InvStd(inv) = saved else { unreachable!() };
            let (_, c) = x[0].dims2();
            let mut dx = vec![0.0; y.len()];
            for (((yr, gr), dr), s) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).zip(inv) {
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgy = kernels::dot(gr, yr) / c as f64;
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = s * (gv - mg - yv * mgy);
                }
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y), tape.value(m));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([4]));
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_pick_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([1, 2]));
        let p = tape.softmax_rows(x).unwrap();
        let l = tape.index(p, 0).unwrap();
        let g = tape.backward(l).unwrap();
        let v = g.wrt(x).values();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros([3]));
        let l = tape.mul(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(unused), &Tensor::zeros([3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn max_rows_pools_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let m = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(m).values(), &[3.0, 5.0]);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1000], 1.0));
        let a = tape.dropout(x, 0.5, 7).unwrap();
        let b = tape.dropout(x, 0.5, 7).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let vals = tape.value(a).values();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        let c = tape.dropout(x, 0.0, 7).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }

    #[test]
    fn single_precision_rounds_values() {
        let mut tape = Tape::with_precision(Precision::Single);
        let x = tape.constant(Tensor::scalar(0.1));
        assert_eq!(tape.value(x).item(), 0.1f32 as f64);
    }
}
