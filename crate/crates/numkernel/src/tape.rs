//! Reverse-mode differentiation over a per-step computation tape.
//!
//! A [`Tape`] records every primitive application in creation order, so node
//! ids are already a topological order. [`Tape::backward`] walks the nodes in
//! reverse id order exactly once and accumulates gradients additively across
//! fan-out. Tapes are cheap and meant to be rebuilt for every optimisation
//! step.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Norm below which a vector counts as degenerate for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Norm below which L2 normalisation returns the zero vector.
pub const NORMALIZE_EPS: f64 = 1e-30;

/// The differentiable primitive catalog.
///
/// Elementwise binary primitives (`Add`, `Sub`, `Mul`) accept exactly three
/// operand layouts: equal shapes; a right operand that is a vector matching
/// the left operand's last axis (row broadcast); a single-element right
/// operand (scalar broadcast). "Last axis" primitives treat the input as a
/// stack of rows of length `shape.last()`. Spatial primitives take
/// `[H, W, C]` (or `[H, W]`) grids.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    Reshape(Vec<usize>),
    /// Concatenate along axis 0; trailing axes must agree.
    Concat,
    /// Rows `start..start + len` along axis 0.
    Slice { start: usize, len: usize },
    /// Softmax over the last axis (max-subtracted).
    Softmax,
    Tanh,
    Sigmoid,
    /// `ln σ(x)`, branching on the sign of `x`.
    LogSigmoid,
    Exp,
    /// Mean over one axis; the axis is removed (a fully reduced result is `[1]`).
    Mean { axis: usize },
    /// Population variance over one axis; the axis is removed.
    Variance { axis: usize },
    /// `(x - mean) / sqrt(var + eps)` over the last axis.
    Standardize { eps: f64 },
    /// Divide each last-axis row by its L2 norm; rows with norm below
    /// [`NORMALIZE_EPS`] map to zero.
    L2Normalize,
    /// Cosine similarity of matching last-axis rows; degenerate rows
    /// (norm below [`COSINE_EPS`]) give 0.
    Cosine,
    /// Non-overlapping 2x2 average over the two leading (spatial) axes.
    AvgPool2,
    /// Nearest-neighbour 2x upsampling over the two leading axes.
    Upsample2,
    /// Sum of all elements, shape `[1]`.
    Sum,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Softmax => "softmax",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::Exp => "exp",
            Primitive::Mean { .. } => "mean",
            Primitive::Variance { .. } => "variance",
            Primitive::Standardize { .. } => "standardize",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Cosine => "cosine",
            Primitive::AvgPool2 => "avg_pool2",
            Primitive::Upsample2 => "upsample2",
            Primitive::Sum => "sum",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Cosine => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// An append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Rc::new(value), None, Vec::new(), requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        prim: Option<Primitive>,
        inputs: Vec<usize>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            prim,
            inputs,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Apply `prim` to `inputs` and record the result.
    pub fn apply<'t>(&'t self, prim: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if let Some(n) = prim.arity() {
            assert_eq!(inputs.len(), n, "{} takes {n} inputs", prim.name());
        }
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "variable from a different tape");
        }
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.value_of(v.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = forward(&prim, &refs)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(
            Rc::new(out),
            Some(prim),
            inputs.iter().map(|v| v.id).collect(),
            requires_grad,
        ))
    }

    pub fn concat<'t>(&'t self, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(Primitive::Concat, inputs)
    }

    /// Back-propagate from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(NumError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut done: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            pending[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if let Some(prim) = &node.prim {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                let wants: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = backward_rule(prim, &ins, &node.value, &g, &wants);
                for ((&input, grad), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                    if !want {
                        continue;
                    }
                    let grad = grad.expect("gradient for input that requires it");
                    match &mut pending[input] {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(grad),
                    }
                }
            }
            done[id] = Some(
                Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches value shape"),
            );
        }
        Ok(Gradients { grads: done })
    }
}

/// Gradients of a loss with respect to every recorded value that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not require a gradient or the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// The gradient of `var`, or zeros of its shape when it has none.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

macro_rules! unary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        $(
            pub fn $name(self) -> Result<Var<'t>> {
                self.tape.apply($prim, &[self])
            }
        )*
    };
}

macro_rules! binary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        $(
            pub fn $name(self, other: Var<'t>) -> Result<Var<'t>> {
                self.tape.apply($prim, &[self, other])
            }
        )*
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Single value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    binary! {
        add => Primitive::Add,
        sub => Primitive::Sub,
        mul => Primitive::Mul,
        matmul => Primitive::MatMul,
        cosine => Primitive::Cosine,
    }

    unary! {
        transpose => Primitive::Transpose,
        softmax => Primitive::Softmax,
        tanh => Primitive::Tanh,
        sigmoid => Primitive::Sigmoid,
        log_sigmoid => Primitive::LogSigmoid,
        exp => Primitive::Exp,
        l2_normalize => Primitive::L2Normalize,
        avg_pool2 => Primitive::AvgPool2,
        upsample2 => Primitive::Upsample2,
        sum => Primitive::Sum,
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Scale(c), &[self])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Reshape(shape.into()), &[self])
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Slice { start, len }, &[self])
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Mean { axis }, &[self])
    }

    pub fn variance_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Variance { axis }, &[self])
    }

    pub fn standardize(self, eps: f64) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Standardize { eps }, &[self])
    }

    /// Mean of every element, shape `[1]`.
    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }
}

// ---------------------------------------------------------------------------
// forward rules

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row(m) => i % m,
            Bcast::Scalar => 0,
        }
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if b.ndim() == 1 && b.shape()[0] == a.last_dim() {
        Ok(Bcast::Row(a.last_dim()))
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

fn mismatch(op: &'static str, ts: &[&Tensor]) -> NumError {
    NumError::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let m = t.last_dim();
    (t.numel() / m, m)
}

/// Shape with the last axis removed; `[1]` when nothing is left.
fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn spatial(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(mismatch(op, &[t])),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        vec![1]
    } else {
        s
    }
}

fn build(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("primitive output shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `c = a * b` for row-major `a: [m, k]`, `b: [k, n]`, with optional transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // (row stride, col stride) of each logical operand
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the logical dimensions and strides above.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward(prim: &Primitive, ins: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    Ok(match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let bc = broadcast(op, a, b)?;
            let (ad, bd) = (a.data(), b.data());
            let data = (0..ad.len())
                .map(|i| {
                    let y = bd[bc.index(i)];
                    match prim {
                        Primitive::Add => ad[i] + y,
                        Primitive::Sub => ad[i] - y,
                        _ => ad[i] * y,
                    }
                })
                .collect();
            build(a.shape().to_vec(), data)
        }
        Primitive::Scale(c) => build(
            ins[0].shape().to_vec(),
            ins[0].data().iter().map(|v| v * c).collect(),
        ),
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(mismatch(op, ins));
            };
            if k != k2 {
                return Err(mismatch(op, ins));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c);
            build(vec![m, n], c)
        }
        Primitive::Transpose => {
            let a = ins[0];
            let &[m, n] = a.shape() else {
                return Err(mismatch(op, ins));
            };
            let d = a.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            build(vec![n, m], out)
        }
        Primitive::Reshape(shape) => ins[0].clone().reshape(shape.clone())?,
        Primitive::Concat => {
            if ins.is_empty() {
                return Err(mismatch(op, ins));
            }
            let tail = &ins[0].shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in ins {
                if &t.shape()[1..] != tail {
                    return Err(mismatch(op, ins));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            build(shape, data)
        }
        Primitive::Slice { start, len } => {
            let a = ins[0];
            if *len == 0 || start + len > a.shape()[0] {
                return Err(mismatch(op, ins));
            }
            let stride = a.numel() / a.shape()[0];
            let mut shape = a.shape().to_vec();
            shape[0] = *len;
            build(shape, a.data()[start * stride..(start + len) * stride].to_vec())
        }
        Primitive::Softmax => {
            let a = ins[0];
            let (r, m) = rows_cols(a);
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(m).take(r) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            build(a.shape().to_vec(), out)
        }
        Primitive::Tanh => map(ins[0], f64::tanh),
        Primitive::Sigmoid => map(ins[0], sigmoid),
        Primitive::LogSigmoid => map(ins[0], log_sigmoid),
        Primitive::Exp => map(ins[0], f64::exp),
        Primitive::Mean { axis } | Primitive::Variance { axis } => {
            let a = ins[0];
            if *axis >= a.ndim() {
                return Err(mismatch(op, ins));
            }
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            let d = a.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| d[(o * n + j) * inner + i];
                    let mean = (0..n).map(at).sum::<f64>() / n as f64;
                    out[o * inner + i] = if matches!(prim, Primitive::Mean { .. }) {
                        mean
                    } else {
                        (0..n).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / n as f64
                    };
                }
            }
            build(reduced_shape(a.shape(), *axis), out)
        }
        Primitive::Standardize { eps } => {
            let a = ins[0];
            let (_, m) = rows_cols(a);
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(m) {
                let (mean, inv) = row_moments(row, *eps);
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            build(a.shape().to_vec(), out)
        }
        Primitive::L2Normalize => {
            let a = ins[0];
            let (_, m) = rows_cols(a);
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(m) {
                let n = norm(row);
                if n < NORMALIZE_EPS {
                    row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            build(a.shape().to_vec(), out)
        }
        Primitive::Cosine => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, ins));
            }
            let m = a.last_dim();
            let out = a
                .data()
                .chunks(m)
                .zip(b.data().chunks(m))
                .map(|(x, y)| cosine(x, y))
                .collect();
            build(drop_last(a.shape()), out)
        }
        Primitive::AvgPool2 => {
            let a = ins[0];
            let (h, w, c) = spatial(op, a)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(NumError::OddExtent {
                    op,
                    shape: a.shape().to_vec(),
                });
            }
            let (oh, ow) = (h / 2, w / 2);
            let d = a.data();
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..h {
                for x in 0..w {
                    let src = &d[(y * w + x) * c..(y * w + x + 1) * c];
                    let dst = &mut out[((y / 2) * ow + x / 2) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += 0.25 * s);
                }
            }
            let mut shape = a.shape().to_vec();
            shape[0] = oh;
            shape[1] = ow;
            build(shape, out)
        }
        Primitive::Upsample2 => {
            let a = ins[0];
            let (h, w, c) = spatial(op, a)?;
            let (oh, ow) = (2 * h, 2 * w);
            let d = a.data();
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..oh {
                for x in 0..ow {
                    let src = &d[((y / 2) * w + x / 2) * c..][..c];
                    out[(y * ow + x) * c..][..c].copy_from_slice(src);
                }
            }
            let mut shape = a.shape().to_vec();
            shape[0] = oh;
            shape[1] = ow;
            build(shape, out)
        }
        Primitive::Sum => Tensor::scalar(ins[0].data().iter().sum()),
    })
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    build(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx < COSINE_EPS || ny < COSINE_EPS {
        0.0
    } else {
        dot(x, y) / (nx * ny)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

// ---------------------------------------------------------------------------
// backward rules

fn backward_rule(
    prim: &Primitive,
    ins: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let one = |v: Vec<f64>| vec![Some(v)];
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let bc = broadcast("", a, b).expect("checked in forward");
            let (ad, bd) = (a.data(), b.data());
            let ga = wants[0].then(|| match prim {
                Primitive::Mul => (0..g.len()).map(|i| g[i] * bd[bc.index(i)]).collect(),
                _ => g.to_vec(),
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![0.0; bd.len()];
                for i in 0..g.len() {
                    gb[bc.index(i)] += match prim {
                        Primitive::Add => g[i],
                        Primitive::Sub => -g[i],
                        _ => g[i] * ad[i],
                    };
                }
                gb
            });
            vec![ga, gb]
        }
        Primitive::Scale(c) => one(g.iter().map(|v| v * c).collect()),
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wants[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga);
                ga
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Primitive::Transpose => {
            let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            one(ga)
        }
        Primitive::Reshape(_) => one(g.to_vec()),
        Primitive::Concat => {
            let mut offset = 0;
            ins.iter()
                .zip(wants)
                .map(|(t, &w)| {
                    let part = g[offset..offset + t.numel()].to_vec();
                    offset += t.numel();
                    w.then_some(part)
                })
                .collect()
        }
        Primitive::Slice { start, len } => {
            let a = ins[0];
            let stride = a.numel() / a.shape()[0];
            let mut ga = vec![0.0; a.numel()];
            ga[start * stride..(start + len) * stride].copy_from_slice(g);
            one(ga)
        }
        Primitive::Softmax => {
            let m = out.last_dim();
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for ((gr, yr), dst) in g.chunks(m).zip(y.chunks(m)).zip(ga.chunks_mut(m)) {
                let s = dot(gr, yr);
                for j in 0..m {
                    dst[j] = yr[j] * (gr[j] - s);
                }
            }
            one(ga)
        }
        Primitive::Tanh => one(zip_map(g, out.data(), |g, y| g * (1.0 - y * y))),
        Primitive::Sigmoid => one(zip_map(g, out.data(), |g, y| g * y * (1.0 - y))),
        Primitive::LogSigmoid => one(zip_map(g, ins[0].data(), |g, x| g * sigmoid(-x))),
        Primitive::Exp => one(zip_map(g, out.data(), |g, y| g * y)),
        Primitive::Mean { axis } | Primitive::Variance { axis } => {
            let a = ins[0];
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            let d = a.data();
            let mut ga = vec![0.0; a.numel()];
            let is_mean = matches!(prim, Primitive::Mean { .. });
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    let idx = |j: usize| (o * n + j) * inner + i;
                    if is_mean {
                        (0..n).for_each(|j| ga[idx(j)] = go / n as f64);
                    } else {
                        let mean = (0..n).map(|j| d[idx(j)]).sum::<f64>() / n as f64;
                        (0..n).for_each(|j| {
                            ga[idx(j)] = go * 2.0 * (d[idx(j)] - mean) / n as f64
                        });
                    }
                }
            }
            one(ga)
        }
        Primitive::Standardize { eps } => {
            let a = ins[0];
            let m = a.last_dim();
            let mut ga = vec![0.0; a.numel()];
            for ((xr, gr), (yr, dst)) in a
                .data()
                .chunks(m)
                .zip(g.chunks(m))
                .zip(out.data().chunks(m).zip(ga.chunks_mut(m)))
            {
                let (_, inv) = row_moments(xr, *eps);
                let gm = gr.iter().sum::<f64>() / m as f64;
                let gy = dot(gr, yr) / m as f64;
                for j in 0..m {
                    dst[j] = inv * (gr[j] - gm - yr[j] * gy);
                }
            }
            one(ga)
        }
        Primitive::L2Normalize => {
            let a = ins[0];
            let m = a.last_dim();
            let mut ga = vec![0.0; a.numel()];
            for ((xr, gr), (yr, dst)) in a
                .data()
                .chunks(m)
                .zip(g.chunks(m))
                .zip(out.data().chunks(m).zip(ga.chunks_mut(m)))
            {
                let n = norm(xr);
                if n < NORMALIZE_EPS {
                    continue;
                }
                let gy = dot(gr, yr);
                for j in 0..m {
                    dst[j] = (gr[j] - yr[j] * gy) / n;
                }
            }
            one(ga)
        }
        Primitive::Cosine => {
            let (a, b) = (ins[0], ins[1]);
            let m = a.last_dim();
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (r, (xr, yr)) in a.data().chunks(m).zip(b.data().chunks(m)).enumerate() {
                let (nx, ny) = (norm(xr), norm(yr));
                if nx < COSINE_EPS || ny < COSINE_EPS {
                    continue;
                }
                let c = out.data()[r];
                let gr = g[r];
                for j in 0..m {
                    ga[r * m + j] = gr * (yr[j] / (nx * ny) - c * xr[j] / (nx * nx));
                    gb[r * m + j] = gr * (xr[j] / (nx * ny) - c * yr[j] / (ny * ny));
                }
            }
            vec![wants[0].then_some(ga), wants[1].then_some(gb)]
        }
        Primitive::AvgPool2 => {
            let a = ins[0];
            let (h, w, c) = spatial("", a).expect("checked in forward");
            let ow = w / 2;
            let mut ga = vec![0.0; a.numel()];
            for y in 0..h {
                for x in 0..w {
                    let src = &g[((y / 2) * ow + x / 2) * c..][..c];
                    ga[(y * w + x) * c..][..c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d = 0.25 * s);
                }
            }
            one(ga)
        }
        Primitive::Upsample2 => {
            let a = ins[0];
            let (h, w, c) = spatial("", a).expect("checked in forward");
            let ow = 2 * w;
            let mut ga = vec![0.0; a.numel()];
            for y in 0..2 * h {
                for x in 0..ow {
                    let src = &g[(y * ow + x) * c..][..c];
                    ga[((y / 2) * w + x / 2) * c..][..c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            one(ga)
        }
        Primitive::Sum => one(vec![g[0]; ins[0].numel()]),
    }
}

fn zip_map(g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}
