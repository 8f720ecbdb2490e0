//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s; [`Var::backward`]
//! walks the records in reverse id order and returns the adjoint of each node.
//! Values are `f64` throughout.
//!
//! ```
//! use activestereo::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0]);
//! ```
//!
//! Conventions:
//! - binary ops broadcast only when shapes are equal or one side holds a single element;
//! - `min`/`max` route the adjoint to the first argument on exact ties;
//! - masked means over an empty mask return 0 with zero gradient;
//! - [`Var::div`] rejects divisors with `|b| <= SAFE_DIV_EPS`, [`Var::div_safe`]
//!   yields 0 (and zero gradient) there instead.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

/// Divisor magnitude at or below which division is considered singular.
pub const SAFE_DIV_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("division by a value of magnitude <= {SAFE_DIV_EPS:e} at element {index}")]
    DivisionByZero { index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("mask must be binary, found {0}")]
    NonBinaryMask(f64),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::InvalidShape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn same_shape(&self, data: Vec<f64>) -> Tensor {
        Tensor { shape: self.shape.clone(), data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    DivSafe,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Abs,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean { a: usize, mask: Option<Rc<Tensor>>, count: f64 },
    BoxFilter { a: usize, radius: usize },
    DiffX(usize),
    DiffY(usize),
    AvgPool2(usize),
    Sample { src: usize, u: usize, v: usize, valid: Rc<Vec<bool>> },
    Element { a: usize, index: usize },
    Channel { a: usize, channel: usize },
    Stack(Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Parent ids are always smaller than child ids.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value().shape).finish()
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidShape("stack of zero tensors".into()))?.value();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut requires = false;
        for p in parts {
            let v = p.value();
            if v.shape != first.shape {
                return Err(AutodiffError::ShapeMismatch { lhs: first.shape.clone(), rhs: v.shape.clone() });
            }
            data.extend_from_slice(&v.data);
            requires |= self.requires(p.id);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(self.push(Tensor { shape, data }, Op::Stack(parts.iter().map(|p| p.id).collect()), requires))
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.len() == 1 {
        Ok(a.shape.clone())
    } else if a.len() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(AutodiffError::ShapeMismatch { lhs: a.shape.clone(), rhs: b.shape.clone() })
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [h, w] => Ok((h, w)),
        _ => Err(AutodiffError::InvalidShape(format!("{what} expects a [h, w] tensor, got {:?}", t.shape))),
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

fn box_filter_forward(data: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                s += data[y * w + reflect(x as isize + k, w)];
            }
            tmp[y * w + x] = s * norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                s += tmp[reflect(y as isize + k, h) * w + x];
            }
            out[y * w + x] = s * norm;
        }
    }
    out
}

fn box_filter_adjoint(grad: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x] * norm;
            for k in -r..=r {
                tmp[reflect(y as isize + k, h) * w + x] += g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x] * norm;
            for k in -r..=r {
                out[y * w + reflect(x as isize + k, w)] += g;
            }
        }
    }
    out
}

/// Bilinear cell lookup shared by forward and backward sampling.
#[inline]
fn cell(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    crate::image::lattice_cell(c, n)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item().expect("item() on a multi-element tensor")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    fn binary(self, kind: Binary, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(&a, &b)?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (at(&a, i), at(&b, i));
            data.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y.abs() <= SAFE_DIV_EPS {
                        return Err(AutodiffError::DivisionByZero { index: i });
                    }
                    x / y
                }
                Binary::DivSafe => {
                    if y.abs() <= SAFE_DIV_EPS {
                        0.0
                    } else {
                        x / y
                    }
                }
                Binary::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
                Binary::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            });
        }
        let requires = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self.tape.push(Tensor { shape, data }, Op::Binary(kind, self.id, other.id), requires))
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let a = self.value();
        let data = a
            .data
            .iter()
            .map(|&x| match kind {
                Unary::Neg => -x,
                Unary::Abs => x.abs(),
                Unary::Exp => x.exp(),
            })
            .collect();
        let requires = self.tape.requires(self.id);
        self.tape.push(a.same_shape(data), Op::Unary(kind, self.id), requires)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, other)
    }

    /// Division; errors when any divisor has `|b| <= SAFE_DIV_EPS`.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, other)
    }

    /// Division yielding 0 (with zero gradient) where `|b| <= SAFE_DIV_EPS`.
    pub fn div_safe(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::DivSafe, other)
    }

    pub fn min(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Min, other)
    }

    pub fn max(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Max, other)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.add(self.tape.scalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.mul(self.tape.scalar(c))
    }

    pub fn add_const(self, c: Tensor) -> Result<Var<'t>> {
        self.add(self.tape.constant(c))
    }

    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        self.mul(self.tape.constant(c))
    }

    /// `1 / self`.
    pub fn recip(self) -> Result<Var<'t>> {
        self.tape.scalar(1.0).div(self)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data.iter().map(|&x| x.clamp(lo, hi)).collect();
        let requires = self.tape.requires(self.id);
        self.tape.push(a.same_shape(data), Op::Clamp { a: self.id, lo, hi }, requires)
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let s = a.data.iter().sum();
        let requires = self.tape.requires(self.id);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), requires)
    }

    /// Mean over all elements; an empty tensor yields 0.
    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let count = a.len() as f64;
        let m = if a.is_empty() { 0.0 } else { a.data.iter().sum::<f64>() / count };
        let requires = self.tape.requires(self.id);
        self.tape.push(Tensor::scalar(m), Op::Mean { a: self.id, mask: None, count }, requires)
    }

    /// Mean over elements where `mask == 1`; zero mask sum yields 0 with zero gradient.
    pub fn mean_masked(self, mask: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if mask.shape != a.shape {
            return Err(AutodiffError::ShapeMismatch { lhs: a.shape.clone(), rhs: mask.shape.clone() });
        }
        if let Some(&bad) = mask.data.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(AutodiffError::NonBinaryMask(bad));
        }
        let count: f64 = mask.data.iter().sum();
        let m = if count == 0.0 { 0.0 } else { a.data.iter().zip(&mask.data).map(|(x, m)| x * m).sum::<f64>() / count };
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(
            Tensor::scalar(m),
            Op::Mean { a: self.id, mask: Some(Rc::new(mask.clone())), count },
            requires,
        ))
    }

    /// `(2r+1)²` box average over a `[h, w]` tensor with reflected borders.
    pub fn box_filter(self, radius: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (h, w) = rank2(&a, "box_filter")?;
        let data = box_filter_forward(&a.data, h, w, radius);
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(a.same_shape(data), Op::BoxFilter { a: self.id, radius }, requires))
    }

    /// Forward difference along x: `[h, w] -> [h, w-1]`.
    pub fn diff_x(self) -> Result<Var<'t>> {
        let a = self.value();
        let (h, w) = rank2(&a, "diff_x")?;
        let wo = w.saturating_sub(1);
        let mut data = Vec::with_capacity(h * wo);
        for y in 0..h {
            for x in 0..wo {
                data.push(a.data[y * w + x + 1] - a.data[y * w + x]);
            }
        }
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor { shape: vec![h, wo], data }, Op::DiffX(self.id), requires))
    }

    /// Forward difference along y: `[h, w] -> [h-1, w]`.
    pub fn diff_y(self) -> Result<Var<'t>> {
        let a = self.value();
        let (h, w) = rank2(&a, "diff_y")?;
        let ho = h.saturating_sub(1);
        let mut data = Vec::with_capacity(ho * w);
        for y in 0..ho {
            for x in 0..w {
                data.push(a.data[(y + 1) * w + x] - a.data[y * w + x]);
            }
        }
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor { shape: vec![ho, w], data }, Op::DiffY(self.id), requires))
    }

    /// 2×2 average pooling, dropping odd trailing rows/columns.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let a = self.value();
        let (h, w) = rank2(&a, "avg_pool2")?;
        if h < 2 || w < 2 {
            return Err(AutodiffError::InvalidShape(format!("cannot pool a {h}x{w} tensor")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(ho * wo);
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                data.push(0.25 * (a.data[i] + a.data[i + 1] + a.data[i + w] + a.data[i + w + 1]));
            }
        }
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor { shape: vec![ho, wo], data }, Op::AvgPool2(self.id), requires))
    }

    /// Bilinear sampling of `self` (a `[h, w]` source) at coordinates `(u, v)`.
    ///
    /// `u`, `v` and the optional `visible` mask share the output shape. Returns the
    /// sampled values and a validity mask; invalid samples (outside `[0, w-1] x [0, h-1]`
    /// or not visible) are 0 and propagate no gradient. Differentiable with respect to
    /// the source values and to both coordinates.
    pub fn sample(self, u: Var<'t>, v: Var<'t>, visible: Option<&[bool]>) -> Result<(Var<'t>, Vec<bool>)> {
        let src = self.value();
        let (h, w) = rank2(&src, "sample source")?;
        let uu = u.value();
        let vv = v.value();
        if uu.shape != vv.shape {
            return Err(AutodiffError::ShapeMismatch { lhs: uu.shape.clone(), rhs: vv.shape.clone() });
        }
        let n = uu.len();
        if let Some(vis) = visible {
            if vis.len() != n {
                return Err(AutodiffError::InvalidShape("visibility mask size".into()));
            }
        }
        let mut data = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for i in 0..n {
            let vis = visible.map_or(true, |m| m[i]);
            let sample = if vis {
                match (cell(uu.data[i], w), cell(vv.data[i], h)) {
                    (Some((x0, x1, fx)), Some((y0, y1, fy))) => {
                        let top = src.data[y0 * w + x0] * (1.0 - fx) + src.data[y0 * w + x1] * fx;
                        let bot = src.data[y1 * w + x0] * (1.0 - fx) + src.data[y1 * w + x1] * fx;
                        Some(top * (1.0 - fy) + bot * fy)
                    }
                    _ => None,
                }
            } else {
                None
            };
            valid.push(sample.is_some());
            data.push(sample.unwrap_or(0.0));
        }
        let requires = self.tape.requires(self.id) || self.tape.requires(u.id) || self.tape.requires(v.id);
        let out = self.tape.push(
            Tensor { shape: uu.shape.clone(), data },
            Op::Sample { src: self.id, u: u.id, v: v.id, valid: Rc::new(valid.clone()) },
            requires,
        );
        Ok((out, valid))
    }

    /// Single element as a scalar.
    pub fn element(self, index: usize) -> Result<Var<'t>> {
        let a = self.value();
        let value =
            *a.data.get(index).ok_or_else(|| AutodiffError::InvalidShape(format!("index {index} out of range")))?;
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor::scalar(value), Op::Element { a: self.id, index }, requires))
    }

    /// Channel `c` of a `[C, H, W]` tensor.
    pub fn channel(self, channel: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (c, h, w) = match a.shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(AutodiffError::InvalidShape(format!("channel() expects [C, H, W], got {:?}", a.shape))),
        };
        if channel >= c {
            return Err(AutodiffError::InvalidShape(format!("channel {channel} of {c}")));
        }
        let data = a.data[channel * h * w..(channel + 1) * h * w].to_vec();
        let requires = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor { shape: vec![h, w], data }, Op::Channel { a: self.id, channel }, requires))
    }

    /// Reverse pass from a scalar, finite loss.
    pub fn backward(self) -> Result<Gradients> {
        let loss = self.value();
        if loss.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss.shape.clone()));
        }
        if !loss.data[0].is_finite() {
            return Err(AutodiffError::NonFiniteLoss(loss.data[0]));
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.id + 1);
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(Tensor { shape: loss.shape.clone(), data: vec![1.0] });

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], target: usize, contribution: Vec<f64>) {
    if !nodes[target].requires_grad {
        return;
    }
    let shape = &nodes[target].value.shape;
    let n: usize = shape.iter().product();
    // Broadcast operands receive the summed adjoint.
    let contribution = if contribution.len() != n && n == 1 { vec![contribution.iter().sum()] } else { contribution };
    match &mut grads[target] {
        Some(existing) => {
            for (e, c) in existing.data.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => {
            *slot = Some(Tensor { shape: shape.clone(), data: contribution });
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let n = g.len();
            let mut ga = Vec::with_capacity(n);
            let mut gb = Vec::with_capacity(n);
            for i in 0..n {
                let (x, y, gi) = (at(av, i), at(bv, i), g.data[i]);
                let (da, db) = match kind {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * y, gi * x),
                    Binary::Div => (gi / y, -gi * x / (y * y)),
                    Binary::DivSafe => {
                        if y.abs() <= SAFE_DIV_EPS {
                            (0.0, 0.0)
                        } else {
                            (gi / y, -gi * x / (y * y))
                        }
                    }
                    Binary::Min => {
                        if x <= y {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                    Binary::Max => {
                        if x >= y {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                };
                ga.push(da);
                gb.push(db);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Unary(kind, a) => {
            let av = &nodes[*a].value;
            let out = &node.value;
            let ga = g
                .data
                .iter()
                .enumerate()
                .map(|(i, &gi)| match kind {
                    Unary::Neg => -gi,
                    Unary::Abs => {
                        let x = av.data[i];
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }
                    Unary::Exp => gi * out.data[i],
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Clamp { a, lo, hi } => {
            let av = &nodes[*a].value;
            let ga = g.data.iter().zip(&av.data).map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(nodes, grads, *a, vec![g.data[0]; n]);
        }
        Op::Mean { a, mask, count } => {
            let n = nodes[*a].value.len();
            if *count == 0.0 {
                accumulate(nodes, grads, *a, vec![0.0; n]);
                return;
            }
            let scale = g.data[0] / count;
            let ga = match mask {
                None => vec![scale; n],
                Some(m) => m.data.iter().map(|&mi| mi * scale).collect(),
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::BoxFilter { a, radius } => {
            let (h, w) = (g.shape[0], g.shape[1]);
            accumulate(nodes, grads, *a, box_filter_adjoint(&g.data, h, w, *radius));
        }
        Op::DiffX(a) => {
            let shape = &nodes[*a].value.shape;
            let (h, w) = (shape[0], shape[1]);
            let wo = w.saturating_sub(1);
            let mut ga = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..wo {
                    let gi = g.data[y * wo + x];
                    ga[y * w + x + 1] += gi;
                    ga[y * w + x] -= gi;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::DiffY(a) => {
            let shape = &nodes[*a].value.shape;
            let (h, w) = (shape[0], shape[1]);
            let ho = h.saturating_sub(1);
            let mut ga = vec![0.0; h * w];
            for y in 0..ho {
                for x in 0..w {
                    let gi = g.data[y * w + x];
                    ga[(y + 1) * w + x] += gi;
                    ga[y * w + x] -= gi;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::AvgPool2(a) => {
            let shape = &nodes[*a].value.shape;
            let (h, w) = (shape[0], shape[1]);
            let (ho, wo) = (h / 2, w / 2);
            let mut ga = vec![0.0; h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let gi = 0.25 * g.data[y * wo + x];
                    let i = 2 * y * w + 2 * x;
                    ga[i] += gi;
                    ga[i + 1] += gi;
                    ga[i + w] += gi;
                    ga[i + w + 1] += gi;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sample { src, u, v, valid } => {
            let sv = &nodes[*src].value;
            let (h, w) = (sv.shape[0], sv.shape[1]);
            let uu = &nodes[*u].value;
            let vv = &nodes[*v].value;
            let n = g.len();
            let want_src = nodes[*src].requires_grad;
            let mut gs = if want_src { vec![0.0; h * w] } else { Vec::new() };
            let mut gu = vec![0.0; n];
            let mut gv = vec![0.0; n];
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let gi = g.data[i];
                let (x0, x1, fx) = cell(uu.data[i], w).expect("valid sample");
                let (y0, y1, fy) = cell(vv.data[i], h).expect("valid sample");
                let p00 = sv.data[y0 * w + x0];
                let p10 = sv.data[y0 * w + x1];
                let p01 = sv.data[y1 * w + x0];
                let p11 = sv.data[y1 * w + x1];
                if x1 != x0 {
                    gu[i] = gi * ((p10 - p00) * (1.0 - fy) + (p11 - p01) * fy);
                }
                if y1 != y0 {
                    gv[i] = gi * ((p01 - p00) * (1.0 - fx) + (p11 - p10) * fx);
                }
                if want_src {
                    gs[y0 * w + x0] += gi * (1.0 - fx) * (1.0 - fy);
                    gs[y0 * w + x1] += gi * fx * (1.0 - fy);
                    gs[y1 * w + x0] += gi * (1.0 - fx) * fy;
                    gs[y1 * w + x1] += gi * fx * fy;
                }
            }
            if want_src {
                accumulate(nodes, grads, *src, gs);
            }
            accumulate(nodes, grads, *u, gu);
            accumulate(nodes, grads, *v, gv);
        }
        Op::Element { a, index } => {
            let n = nodes[*a].value.len();
            let mut ga = vec![0.0; n];
            ga[*index] = g.data[0];
            accumulate(nodes, grads, *a, ga);
        }
        Op::Channel { a, channel } => {
            let shape = &nodes[*a].value.shape;
            let plane = shape[1] * shape[2];
            let mut ga = vec![0.0; shape[0] * plane];
            ga[channel * plane..(channel + 1) * plane].copy_from_slice(&g.data);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Stack(parts) => {
            let plane = g.len() / parts.len();
            for (k, p) in parts.iter().enumerate() {
                accumulate(nodes, grads, *p, g.data[k * plane..(k + 1) * plane].to_vec());
            }
        }
    }
}

/// Adjoints of every node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when no path reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`; zeros when unreached.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.value().shape))
    }
}
