//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in creation
//! order, so parents always precede children. [`Tape::backward`] walks the
//! nodes once in reverse and returns a [`Gradients`] map. Tapes are cheap and
//! meant to be rebuilt for every forward pass.
//!
//! Shapes are promoted explicitly. The only broadcast is scalar-times-tensor
//! in [`Primitive::Mul`].

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has shape `[]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
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

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// Operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k]·[k,n] -> [m,n]` or `[m,k]·[k] -> [m]`.
    MatMul,
    Add,
    /// Elementwise product; either operand may be a one-element scalar.
    Mul,
    ScaleByConstant(f64),
    Tanh,
    Relu,
    /// Softmax over the last dimension, with max subtraction.
    Softmax,
    /// Softmax over the unmasked entries of the last dimension; masked
    /// entries are exactly zero. The mask is a constant.
    MaskedSoftmax(Vec<bool>),
    Log,
    Sum,
    Square,
    /// Row `i` of a matrix, or element `i` of a vector (as a scalar).
    SelectRow(usize),
    /// Concatenation along the first axis. Scalars count as length-1 vectors.
    Concat,
    StopGradient,
    /// Identity forward; backward multiplies the incoming gradient.
    ScaleGradient(f64),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "elementwise_mul",
            Primitive::ScaleByConstant(_) => "scale_by_constant",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax_lastdim",
            Primitive::MaskedSoftmax(_) => "masked_softmax",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Square => "square",
            Primitive::SelectRow(_) => "select_row",
            Primitive::Concat => "concat",
            Primitive::StopGradient => "stop_gradient",
            Primitive::ScaleGradient(_) => "scale_gradient",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Prim(Primitive),
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Applies `prim` to `inputs`, records it, and returns the output.
    pub fn apply<'t>(&'t self, prim: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "variable belongs to another tape");
        }
        if let Some(n) = prim.arity() {
            assert_eq!(inputs.len(), n, "{} takes {} inputs", prim.name(), n);
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = forward(&prim, &values)?;
            let requires_grad = !matches!(prim, Primitive::StopGradient)
                && inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, requires_grad)
        };
        let parents = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Op::Prim(prim), parents, value, requires_grad))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(Primitive::Concat, parts)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::filled(&root.value.shape, 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let prim = match &node.op {
                Op::Leaf => continue,
                Op::Prim(p) => p,
            };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let contributions = vjp(prim, &inputs, &node.value, &g);
            for (&parent, contribution) in node.parents.iter().zip(contributions) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        // Only leaves keep their slot; interior adjoints were consumed above.
        let shapes = nodes[..=loss.id].iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value. Do not hold it across new tape operations.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, prim: Primitive) -> Result<Var<'t>> {
        self.tape.apply(prim, &[self])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::MatMul, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let neg = rhs.scale(-1.0)?;
        self.add(neg)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Mul, &[self, rhs])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Primitive::ScaleByConstant(factor))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Primitive::Tanh)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Relu)
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Primitive::Softmax)
    }

    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>> {
        self.unary(Primitive::MaskedSoftmax(mask.to_vec()))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value_ref().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Primitive::Square)
    }

    pub fn select(self, index: usize) -> Result<Var<'t>> {
        self.unary(Primitive::SelectRow(index))
    }

    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.mul(rhs)?.sum()
    }

    pub fn stop_gradient(self) -> Result<Var<'t>> {
        self.unary(Primitive::StopGradient)
    }

    pub fn scale_gradient(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Primitive::ScaleGradient(factor))
    }
}

/// Gradients of one backward sweep, keyed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf; zeros when the leaf does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => match self.shapes.get(var.id) {
                Some(shape) => Tensor::zeros(shape),
                None => Tensor::zeros(&var.shape()),
            },
        }
    }
}

fn mismatch(prim: &Primitive, inputs: &[&Tensor]) -> Error {
    Error::ShapeMismatch {
        op: prim.name(),
        shapes: inputs.iter().map(|t| t.shape.clone()).collect(),
    }
}

/// Softmax of one row with max subtraction. With a mask, masked entries are
/// exactly zero and the rest renormalise among themselves.
pub fn softmax_values(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, mask, &mut out);
    out
}

fn softmax_into(src: &[f64], mask: Option<&[bool]>, dst: &mut [f64]) {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..src.len())
        .filter(|&i| live(i))
        .map(|i| src[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..src.len() {
        if live(i) {
            dst[i] = (src[i] - max).exp();
            total += dst[i];
        } else {
            dst[i] = 0.0;
        }
    }
    for v in dst.iter_mut() {
        *v /= total;
    }
}

fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let width = *x.shape.last().unwrap_or(&1);
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(width).zip(out.chunks_mut(width)) {
        softmax_into(src, mask, dst);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let x = inputs[0];
    match prim {
        Primitive::MatMul => {
            let b = inputs[1];
            match (x.shape.as_slice(), b.shape.as_slice()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a = x.data[i * k + p];
                            let brow = &b.data[p * n..(p + 1) * n];
                            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                                *o += a * bv;
                            }
                        }
                    }
                    Ok(Tensor {
                        shape: vec![m, n],
                        data: out,
                    })
                }
                (&[m, k], &[k2]) if k == k2 => {
                    let data = (0..m)
                        .map(|i| {
                            x.data[i * k..(i + 1) * k]
                                .iter()
                                .zip(&b.data)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    Ok(Tensor {
                        shape: vec![m],
                        data,
                    })
                }
                _ => Err(mismatch(prim, inputs)),
            }
        }
        Primitive::Add => {
            let b = inputs[1];
            if x.shape != b.shape {
                return Err(mismatch(prim, inputs));
            }
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&b.data).map(|(a, b)| a + b).collect(),
            })
        }
        Primitive::Mul => {
            let b = inputs[1];
            if x.shape == b.shape {
                Ok(Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().zip(&b.data).map(|(a, b)| a * b).collect(),
                })
            } else if x.is_scalar() {
                let s = x.item();
                Ok(b.map(|v| s * v))
            } else if b.is_scalar() {
                let s = b.item();
                Ok(x.map(|v| v * s))
            } else {
                Err(mismatch(prim, inputs))
            }
        }
        Primitive::ScaleByConstant(c) => Ok(x.map(|v| c * v)),
        Primitive::Tanh => Ok(x.map(f64::tanh)),
        Primitive::Relu => Ok(x.map(|v| v.max(0.0))),
        Primitive::Softmax => {
            if x.shape.is_empty() {
                return Err(mismatch(prim, inputs));
            }
            Ok(softmax_rows(x, None))
        }
        Primitive::MaskedSoftmax(mask) => {
            if x.shape.last() != Some(&mask.len()) {
                return Err(mismatch(prim, inputs));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::AllMasked);
            }
            Ok(softmax_rows(x, Some(mask)))
        }
        Primitive::Log => {
            if let Some((index, &value)) = x.data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(Error::NonPositiveLog { index, value });
            }
            Ok(x.map(f64::ln))
        }
        Primitive::Sum => Ok(Tensor::scalar(x.data.iter().sum())),
        Primitive::Square => Ok(x.map(|v| v * v)),
        Primitive::SelectRow(i) => match *x.shape.as_slice() {
            [n] => {
                if *i >= n {
                    return Err(Error::IndexOutOfRange {
                        op: "select_row",
                        index: *i,
                        len: n,
                    });
                }
                Ok(Tensor::scalar(x.data[*i]))
            }
            [r, c] => {
                if *i >= r {
                    return Err(Error::IndexOutOfRange {
                        op: "select_row",
                        index: *i,
                        len: r,
                    });
                }
                Ok(Tensor::vector(x.data[i * c..(i + 1) * c].to_vec()))
            }
            _ => Err(mismatch(prim, inputs)),
        },
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(mismatch(prim, inputs));
            }
            let trailing = |t: &Tensor| -> Vec<usize> {
                if t.shape.len() <= 1 {
                    Vec::new()
                } else {
                    t.shape[1..].to_vec()
                }
            };
            let tail = trailing(x);
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                if trailing(t) != tail {
                    return Err(mismatch(prim, inputs));
                }
                rows += t.shape.first().copied().unwrap_or(1);
                data.extend_from_slice(&t.data);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Ok(Tensor { shape, data })
        }
        Primitive::StopGradient | Primitive::ScaleGradient(_) => Ok(x.clone()),
    }
}

/// Vector-Jacobian products: one contribution per input.
fn vjp(prim: &Primitive, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    match prim {
        Primitive::MatMul => {
            let b = inputs[1];
            match (x.shape.as_slice(), b.shape.as_slice()) {
                (&[m, k], &[_, n]) => {
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b.data[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(a, b)| a * b).sum();
                            let a = x.data[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                    vec![
                        Tensor {
                            shape: x.shape.clone(),
                            data: da,
                        },
                        Tensor {
                            shape: b.shape.clone(),
                            data: db,
                        },
                    ]
                }
                (&[m, k], &[_]) => {
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        let gi = g.data[i];
                        for p in 0..k {
                            da[i * k + p] = gi * b.data[p];
                            db[p] += gi * x.data[i * k + p];
                        }
                    }
                    vec![
                        Tensor {
                            shape: x.shape.clone(),
                            data: da,
                        },
                        Tensor {
                            shape: b.shape.clone(),
                            data: db,
                        },
                    ]
                }
                _ => unreachable!("matmul shapes validated in forward"),
            }
        }
        Primitive::Add => vec![g.clone(), g.clone()],
        Primitive::Mul => {
            let b = inputs[1];
            let elementwise = |u: &Tensor| Tensor {
                shape: g.shape.clone(),
                data: g.data.iter().zip(&u.data).map(|(a, b)| a * b).collect(),
            };
            let reduce = |u: &Tensor, like: &Tensor| Tensor {
                shape: like.shape.clone(),
                data: vec![g.data.iter().zip(&u.data).map(|(a, b)| a * b).sum()],
            };
            if x.shape == b.shape {
                vec![elementwise(b), elementwise(x)]
            } else if x.is_scalar() {
                let s = x.item();
                vec![reduce(b, x), g.map(|v| v * s)]
            } else {
                let s = b.item();
                vec![g.map(|v| v * s), reduce(x, b)]
            }
        }
        Primitive::ScaleByConstant(c) => vec![g.map(|v| c * v)],
        Primitive::Tanh => vec![Tensor {
            shape: g.shape.clone(),
            data: g
                .data
                .iter()
                .zip(&out.data)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        }],
        Primitive::Relu => vec![Tensor {
            shape: g.shape.clone(),
            data: g
                .data
                .iter()
                .zip(&x.data)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect(),
        }],
        Primitive::Softmax | Primitive::MaskedSoftmax(_) => {
            // dx_i = y_i (g_i - Σ_j g_j y_j); masked entries have y_i = 0.
            let width = *out.shape.last().unwrap_or(&1);
            let mut dx = vec![0.0; out.numel()];
            for ((y, gr), d) in out
                .data
                .chunks(width)
                .zip(g.data.chunks(width))
                .zip(dx.chunks_mut(width))
            {
                let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..width {
                    d[i] = y[i] * (gr[i] - inner);
                }
            }
            vec![Tensor {
                shape: x.shape.clone(),
                data: dx,
            }]
        }
        Primitive::Log => vec![Tensor {
            shape: g.shape.clone(),
            data: g.data.iter().zip(&x.data).map(|(g, v)| g / v).collect(),
        }],
        Primitive::Sum => vec![Tensor::filled(&x.shape, g.item())],
        Primitive::Square => vec![Tensor {
            shape: g.shape.clone(),
            data: g
                .data
                .iter()
                .zip(&x.data)
                .map(|(g, v)| 2.0 * v * g)
                .collect(),
        }],
        Primitive::SelectRow(i) => {
            let mut d = Tensor::zeros(&x.shape);
            let width = g.numel();
            d.data[i * width..(i + 1) * width].copy_from_slice(&g.data);
            vec![d]
        }
        Primitive::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.numel();
                    let part = Tensor {
                        shape: t.shape.clone(),
                        data: g.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    part
                })
                .collect()
        }
        Primitive::StopGradient => vec![Tensor::zeros(&x.shape)],
        Primitive::ScaleGradient(c) => vec![g.map(|v| c * v)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, p: &[f64], h: f64) -> Vec<f64> {
        let mut q = p.to_vec();
        (0..p.len())
            .map(|i| {
                q[i] = p[i] + h;
                let up = f(&q);
                q[i] = p[i] - h;
                let down = f(&q);
                q[i] = p[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape
            .constant(Tensor::vector(vec![2f64.ln(), 0.0]))
            .softmax()
            .unwrap();
        let e0 = 2.0 / (2.0 + 1.0);
        assert_abs_diff_eq!(s.value().data()[0], e0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.value().data()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        match a.matmul(b) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2]]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(matches!(
            tape.constant(Tensor::zeros(&[2])).add(tape.constant(Tensor::zeros(&[3]))),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let err = tape.constant(Tensor::vector(vec![1.0, 0.0])).log().unwrap_err();
        assert!(matches!(err, Error::NonPositiveLog { index: 1, .. }));
    }

    #[test]
    fn backward_square() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.square().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.2]));
        let loss = x.softmax().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        for v in g.data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-16);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.5, -0.25, 2.0]));
        let loss = x.tanh().unwrap().square().unwrap().sum().unwrap();
        let a = tape.backward(loss).unwrap().wrt(x);
        let b = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let loss = x.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn stop_gradient_semantics() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let frozen = x.stop_gradient().unwrap();
        assert_eq!(frozen.value(), x.value());
        let g = tape.backward(frozen.sum().unwrap()).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.mul(x.stop_gradient().unwrap()).unwrap().sum().unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).item(), 3.0);
    }

    #[test]
    fn scale_gradient_semantics() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = x.scale_gradient(2.0).unwrap();
        assert_eq!(s.value(), x.value());
        let g = tape.backward(s.sum().unwrap()).unwrap().wrt(x);
        assert_eq!(g.data(), &[2.0, 2.0]);

        let neutral = |wrap: bool| {
            let tape = Tape::new();
            let x = tape.param(Tensor::vector(vec![0.7, -0.4]));
            let y = if wrap { x.scale_gradient(1.0).unwrap() } else { x };
            let loss = y.tanh().unwrap().square().unwrap().sum().unwrap();
            (loss.item(), tape.backward(loss).unwrap().wrt(x))
        };
        assert_eq!(neutral(true), neutral(false));
    }

    #[test]
    fn reused_leaf_accumulates() {
        // x used in two branches: L = sum(tanh(x)) + sum(x²), dL/dx = 1 - tanh² + 2x
        let xs = [0.3, -0.8];
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(xs.to_vec()));
        let a = x.tanh().unwrap().sum().unwrap();
        let b = x.square().unwrap().sum().unwrap();
        let g = tape.backward(a.add(b).unwrap()).unwrap().wrt(x);
        for (gi, xi) in g.data().iter().zip(xs) {
            let t: f64 = xi.tanh();
            assert_abs_diff_eq!(*gi, 1.0 - t * t + 2.0 * xi, epsilon = 1e-15);
        }
    }

    #[test]
    fn scalar_broadcast_mul() {
        let tape = Tape::new();
        let s = tape.param(Tensor::scalar(0.5));
        let v = tape.param(Tensor::vector(vec![2.0, 4.0]));
        let y = s.mul(v).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(s).item(), 6.0);
        assert_eq!(grads.wrt(v).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let tape = Tape::new();
        let theta = tape.param(Tensor::vector(vec![1.0, 0.2, -0.5]));
        let p = theta.masked_softmax(&[true, false, true]).unwrap();
        let v = p.value();
        assert_eq!(v.data()[1], 0.0);
        assert_abs_diff_eq!(v.data().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        let w = tape.constant(Tensor::vector(vec![1.0, 5.0, -2.0]));
        let g = tape.backward(p.dot(w).unwrap()).unwrap().wrt(theta);
        assert_eq!(g.data()[1], 0.0);
        assert!(matches!(
            theta.masked_softmax(&[false, false, false]),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn select_and_concat_round_trip_gradients() {
        let f = |p: &[f64]| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let m = tape.param(Tensor::matrix(2, 2, p.to_vec()).unwrap());
            let r0 = m.select(0).unwrap();
            let e = r0.select(1).unwrap();
            let joined = tape.concat(&[m.select(1).unwrap(), e, r0]).unwrap();
            assert_eq!(joined.shape(), vec![5]);
            let loss = joined.tanh().unwrap().square().unwrap().sum().unwrap();
            let g = tape.backward(loss).unwrap().wrt(m);
            (loss.item(), g.into_data())
        };
        let p = [0.2, -0.4, 0.9, 0.1];
        let (_, analytic) = f(&p);
        let numeric = fd(|q| f(q).0, &p, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(*a, *n, epsilon = 1e-9);
        }
    }

    #[test]
    fn concat_matrices_stack_rows() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 3]));
        let b = tape.constant(Tensor::filled(&[2, 3], 1.0));
        assert_eq!(tape.concat(&[a, b]).unwrap().shape(), vec![3, 3]);
        let c = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(&[a, c]).is_err());
    }

    #[test]
    fn element_count_checked() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::ElementCount { expected: 4, actual: 3, .. })
        ));
    }
}
