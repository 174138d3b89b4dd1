//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Every trainable computation in the crate is expressed with the ops on
//! [`Tape`]. A tape records nodes in creation order; [`Tape::backward`]
//! walks them in reverse and accumulates gradients into every node that
//! (transitively) depends on a leaf created with [`Tape::leaf`].
//!
//! ```
//! use lmtrack::ndtensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, grad_check_entries, GradCheck};
pub use params::{BoundParams, ParamSet};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("parameter format: {0}")]
    Format(String),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense real array with a row-major layout.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.data.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pointwise nonlinearities exposed by [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Softplus,
    SmoothL1,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::SmoothL1 => "smooth_l1",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            }
            Unary::Square => x * x,
        }
    }

    /// d(apply)/dx given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Softplus => sigmoid(x),
            Unary::SmoothL1 => {
                if x.abs() < 1.0 {
                    x
                } else {
                    x.signum()
                }
            }
            Unary::Square => 2.0 * x,
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, g: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Unary { x: Var, f: Unary },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ScaleBy { x: Var, s: Var },
    Sum { x: Var },
    Mean { x: Var },
    Gather { x: Var, idx: Vec<Option<usize>> },
    Concat(Vec<Var>),
    Reshape { x: Var },
    MarginPhi { x: Var, m: u32 },
    Sparse { x: Var, map: Arc<SparseMap> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Unary { f, .. } => f.name(),
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::Reshape { .. } => "reshape",
            Op::MarginPhi { .. } => "margin_phi",
            Op::Sparse { .. } => "sparse_linear",
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Confined to one thread during a forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    fault: Option<TensorError>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records the first non-finite value produced by any op;
    /// [`Tape::backward`] and [`Tape::check`] then report it.
    pub fn new_checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn check(&self) -> Result<(), TensorError> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.checked && self.fault.is_none() && !value.all_finite() {
            self.fault = Some(TensorError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        self.affine_impl(x, w, Some(b))
    }

    /// `w · x` without a bias.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        self.affine_impl(x, w, None)
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(shape_err(
                "affine",
                format!("W {ws:?} cannot multiply x {xs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} does not match output [{m}]", self.shape(b)),
                ));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o += dot(row, xv);
        }
        let req = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(Tensor { shape: vec![m], data: out }, Op::Affine { x, w, b }, req))
    }

    /// Strided, zero-padded 2-D cross-correlation.
    ///
    /// `x` is `[H, W]` with kernel `[kh, kw]`, or `[C, H, W]` with kernel
    /// `[O, C, kh, kw]` giving `[O, H', W']`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (in_c, in_h, in_w, out_c, kh, kw, planar) = match (xs.len(), ks.len()) {
            (2, 2) => (1, xs[0], xs[1], 1, ks[0], ks[1], true),
            (3, 4) if ks[1] == xs[0] => (xs[0], xs[1], xs[2], ks[0], ks[2], ks[3], false),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("input {xs:?} incompatible with kernel {ks:?}"),
                ))
            }
        };
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", in_h + 2 * pad, in_w + 2 * pad),
            ));
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        let g = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            pad,
        };
        let mut out = vec![0.0; out_c * out_h * out_w];
        conv_forward(self.value(x).data(), self.value(k).data(), &g, &mut out);
        let shape = if planar {
            vec![out_h, out_w]
        } else {
            vec![out_c, out_h, out_w]
        };
        let req = self.req(x) || self.req(k);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, k, g }, req))
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs[0] != bs[0] {
            return Err(shape_err("channel_bias", format!("x {xs:?} with bias {bs:?}")));
        }
        let c = bs[0];
        let per = self.value(x).len() / c;
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, chunk) in out.chunks_mut(per).enumerate() {
            for v in chunk {
                *v += bv[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.req(x) || self.req(b);
        Ok(self.push(Tensor { shape, data: out }, Op::ChannelBias { x, b }, req))
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f.apply(a)).collect();
        let shape = v.shape().to_vec();
        let req = self.req(x);
        self.push(Tensor { shape, data }, Op::Unary { x, f }, req)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f = match kind {
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Tanh => Unary::Tanh,
            Activation::Relu => Unary::Relu,
        };
        self.unary(x, f)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    /// Elementwise robust loss: `0.5u²` inside the unit interval, `|u| − 0.5` outside.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(bv).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor { shape, data }, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "div", Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let shape = v.shape().to_vec();
        let req = self.req(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, req)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a + c).collect();
        let shape = v.shape().to_vec();
        let req = self.req(x);
        self.push(Tensor { shape, data }, Op::AddScalar { x }, req)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("scale_by", format!("factor has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * sv).collect();
        let shape = v.shape().to_vec();
        let req = self.req(x) || self.req(s);
        Ok(self.push(Tensor { shape, data }, Op::ScaleBy { x, s }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, req)
    }

    /// Sum of a list of same-shape values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (first, rest) = parts.split_first().ok_or_else(|| TensorError::Invalid {
            op: "add_all",
            detail: "no operands".into(),
        })?;
        let mut acc = *first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Flat-index gather: `out[i] = x[idx[i]]`, or zero where `idx[i]` is `None`.
    pub fn gather(&mut self, x: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if idx.iter().flatten().any(|&i| i >= n) {
            return Err(shape_err("gather", format!("index out of range for {n} elements")));
        }
        if shape.iter().product::<usize>() != idx.len() || shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(
                "gather",
                format!("{} indices cannot form {shape:?}", idx.len()),
            ));
        }
        let xv = self.value(x).data();
        let data = idx.iter().map(|i| i.map_or(0.0, |i| xv[i])).collect();
        let req = self.req(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather { x, idx },
            req,
        ))
    }

    /// `out[r] = Σ_j w_rj · x[j]` over the entries of `map` (flat indices).
    /// Expresses interpolated sampling, crops and resizes.
    pub fn sparse_linear(&mut self, x: Var, map: Arc<SparseMap>, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if map.max_index().is_some_and(|m| m >= n) {
            return Err(shape_err("sparse_linear", format!("index out of range for {n} elements")));
        }
        if shape.iter().product::<usize>() != map.rows() || shape.is_empty() {
            return Err(shape_err(
                "sparse_linear",
                format!("{} rows cannot form {shape:?}", map.rows()),
            ));
        }
        let data = map.apply(self.value(x).data());
        let req = self.req(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Sparse { x, map },
            req,
        ))
    }

    /// Drops every node created after the first `len` nodes.
    ///
    /// Handles to dropped nodes become invalid; gradients on the kept
    /// nodes are preserved.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Picks element `i` of `x` as a one-element tensor.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var, TensorError> {
        self.gather(x, vec![Some(i)], &[1])
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "no operands".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let req = parts.iter().any(|&p| self.req(p));
        let n = data.len();
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::Concat(parts.to_vec()),
            req,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let req = self.req(x);
        Ok(self.push(t, Op::Reshape { x }, req))
    }

    /// Applies the angular margin function to cosines:
    /// `(−1)^k cos(mθ) − 2k` with `θ = acos(c)` and `k = ⌊θm/π⌋` capped at `m − 1`.
    ///
    /// Within a piece `cos(mθ)` is the Chebyshev polynomial `T_m(c)`, so the
    /// derivative never goes through `acos`.
    pub fn margin_phi(&mut self, x: Var, m: u32) -> Result<Var, TensorError> {
        if m == 0 {
            return Err(TensorError::Invalid {
                op: "margin_phi",
                detail: "margin multiplier must be >= 1".into(),
            });
        }
        let v = self.value(x);
        let data = v.data().iter().map(|&c| phi_of_cos(c, m).0).collect();
        let shape = v.shape().to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor { shape, data }, Op::MarginPhi { x, m }, req))
    }

    /// Populates gradients of every node that depends on a leaf.
    /// Repeated calls accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check()?;
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.req(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.len();
                acc(*x, &mut |gx| {
                    for (r, &gi) in g.iter().enumerate() {
                        let row = &wv[r * n..(r + 1) * n];
                        for (a, &wij) in gx.iter_mut().zip(row) {
                            *a += gi * wij;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (r, &gi) in g.iter().enumerate() {
                        let row = &mut gw[r * n..(r + 1) * n];
                        for (a, &xj) in row.iter_mut().zip(xv) {
                            *a += gi * xj;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi));
                }
            }
            Op::Conv2d { x, k, g: geom } => {
                let (xv, kv) = (val(*x), val(*k));
                acc(*x, &mut |gx| conv_backward_input(g, kv, geom, gx));
                acc(*k, &mut |gk| conv_backward_kernel(g, xv, geom, gk));
            }
            Op::ChannelBias { x, b } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi));
                let c = val(*b).len();
                let per = g.len() / c;
                acc(*b, &mut |gb| {
                    for (ch, chunk) in g.chunks(per).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Unary { x, f } => {
                let xv = val(*x);
                let yv = nodes[i].value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * f.derivative(xv[j], yv[j]);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(p, &q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += c * q));
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += sv * q));
                acc(*s, &mut |gs| gs[0] += dot(g, xv));
            }
            Op::Sum { x } => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::Mean { x } => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::Gather { x, idx } => {
                acc(*x, &mut |gx| {
                    for (j, ix) in idx.iter().enumerate() {
                        if let Some(ix) = ix {
                            gx[*ix] += g[j];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    let seg = &g[off..off + n];
                    acc(*p, &mut |gp| gp.iter_mut().zip(seg).for_each(|(a, &b)| *a += b));
                    off += n;
                }
            }
            Op::Sparse { x, map } => {
                acc(*x, &mut |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        for &(j, w) in map.row(r) {
                            gx[j as usize] += w * gr;
                        }
                    }
                });
            }
            Op::MarginPhi { x, m } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * phi_of_cos(xv[j], *m).1;
                    }
                });
            }
        }
    }
}

/// Row-compressed sparse matrix applied by [`Tape::sparse_linear`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMap {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl SparseMap {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends one output row; empty rows produce zero.
    pub fn push_row(&mut self, row: impl IntoIterator<Item = (usize, f64)>) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.entries.extend(row.into_iter().map(|(j, w)| (j as u32, w)));
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.0 as usize).max()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|r| self.row(r).iter().map(|&(j, w)| w * x[j as usize]).sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Chebyshev values `(T_m(c), U_{m−1}(c))`.
fn chebyshev(c: f64, m: u32) -> (f64, f64) {
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    for _ in 1..m {
        let t_next = 2.0 * c * t - t_prev;
        let u_next = 2.0 * c * u - u_prev;
        t_prev = t;
        t = t_next;
        u_prev = u;
        u = u_next;
    }
    (t, u)
}

/// `(φ, dφ/dc)` at cosine `c`.
pub(crate) fn phi_of_cos(c: f64, m: u32) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = margin_piece(theta, m);
    let (t, u) = chebyshev(c, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    (sign * t - 2.0 * k as f64, sign * m as f64 * u)
}

pub(crate) fn margin_piece(theta: f64, m: u32) -> u32 {
    let k = (theta * m as f64 / std::f64::consts::PI).floor();
    (k.max(0.0) as u32).min(m - 1)
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for o in 0..g.out_c {
        let oplane = &mut out[o * g.out_h * g.out_w..(o + 1) * g.out_h * g.out_w];
        for c in 0..g.in_c {
            let xplane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = k[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let xrow = xprow(xplane, iy as usize, g.in_w);
                        let orow = &mut oplane[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < iw {
                                *ov += w * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn xprow(plane: &[f64], y: usize, w: usize) -> &[f64] {
    &plane[y * w..(y + 1) * w]
}

fn conv_backward_input(gout: &[f64], k: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for o in 0..g.out_c {
        let gplane = &gout[o * g.out_h * g.out_w..(o + 1) * g.out_h * g.out_w];
        for c in 0..g.in_c {
            let xplane = &mut gx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = k[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let row = iy as usize * g.in_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < iw {
                                xplane[row + ix as usize] += w * gplane[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(gout: &[f64], x: &[f64], g: &ConvGeom, gk: &mut [f64]) {
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for o in 0..g.out_c {
        let gplane = &gout[o * g.out_h * g.out_w..(o + 1) * g.out_h * g.out_w];
        for c in 0..g.in_c {
            let xplane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut s = 0.0;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let row = iy as usize * g.in_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < iw {
                                s += xplane[row + ix as usize] * gplane[oy * g.out_w + ox];
                            }
                        }
                    }
                    gk[((o * g.in_c + c) * g.kh + ky) * g.kw + kx] += s;
                }
            }
        }
    }
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: &Tape, x: Var) -> Vec<f64> {
        t.value(x).data().to_vec()
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(v(&t, y), vec![3.0, 4.0]);

        let w0 = t.constant(Tensor::zeros(&[2, 2]));
        let b12 = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = t.affine(x, w0, b12).unwrap();
        assert_eq!(v(&t, y), vec![1.0, 2.0]);

        let ones = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.affine(ones, w, b).unwrap();
        assert_eq!(v(&t, y), vec![3.0, 7.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::zeros(&[2]));
        let err = t.affine(x, w, b).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "affine", .. }), "{err}");
        assert!(err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut t = Tape::new();
        let img: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x = t.constant(Tensor::new(vec![4, 5], img.clone()).unwrap());
        let k = t.constant(Tensor::full(&[1, 1], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(v(&t, y), img);

        let c = t.constant(Tensor::full(&[6, 6], 1.5));
        let k3 = t.constant(Tensor::full(&[3, 3], 1.0));
        let y = t.conv2d(c, k3, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[4, 4]);
        assert!(v(&t, y).iter().all(|&a| a == 13.5));

        let big = t.constant(Tensor::zeros(&[100, 100]));
        let y = t.conv2d(big, k3, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[50, 50]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        let k = t.constant(Tensor::zeros(&[5, 5]));
        assert!(t.conv2d(x, k, 1, 1).is_err());
        assert!(t.conv2d(x, k, 1, 2).is_ok());
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -1.0, 2.0]));
        let s = t.activation(x, Activation::Sigmoid);
        let th = t.activation(x, Activation::Tanh);
        let r = t.activation(x, Activation::Relu);
        assert_eq!(v(&t, s)[0], 0.5);
        assert_eq!(v(&t, th)[0], 0.0);
        assert_eq!(v(&t, r), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_square_and_affine_weights() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let xs = vec![0.5, -2.0, 1.25];
        let x = t.constant(Tensor::vector(xs.clone()));
        let w = t.leaf(Tensor::full(&[4, 3], 0.3));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.affine(x, w, b).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        let gw = t.grad(w).unwrap();
        for i in 0..4 {
            assert_eq!(&gw[i * 3..i * 3 + 3], xs.as_slice());
        }
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            t.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn checked_tape_reports_nan() {
        let mut t = Tape::new_checked();
        let x = t.leaf(Tensor::scalar(-1.0));
        let y = t.ln(x);
        let e = t.backward(y).unwrap_err();
        assert!(matches!(e, TensorError::NonFinite { op: "ln", .. }));
    }

    #[test]
    fn margin_phi_pieces() {
        let (p, _) = phi_of_cos((std::f64::consts::PI / 3.0).cos(), 1);
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(phi_of_cos(1.0, 2).0, 1.0);
        let (p, _) = phi_of_cos((3.0 * std::f64::consts::PI / 4.0).cos(), 2);
        assert!((p + 2.0).abs() < 1e-12);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = t.gather(x, vec![Some(2), None, Some(2), Some(0)], &[2, 2]).unwrap();
        assert_eq!(v(&t, g), vec![3.0, 0.0, 3.0, 1.0]);
        let s = t.sum(g);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn sparse_linear_interpolates_and_scatters() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 3.0, 5.0]));
        let mut m = SparseMap::new();
        m.push_row([(0, 0.5), (1, 0.5)]);
        m.push_row([]);
        m.push_row([(2, 2.0)]);
        let y = t.sparse_linear(x, Arc::new(m.clone()), &[3]).unwrap();
        assert_eq!(v(&t, y), vec![2.0, 0.0, 10.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5, 0.5, 2.0]);
        assert!(t.sparse_linear(x, Arc::new(m), &[2]).is_err());
        let mut bad = SparseMap::new();
        bad.push_row([(3, 1.0)]);
        assert!(t.sparse_linear(x, Arc::new(bad), &[1]).is_err());
    }

    #[test]
    fn truncate_keeps_prefix() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let mark = t.len();
        let y = t.square(x);
        assert_eq!(t.len(), mark + 1);
        t.truncate(mark);
        assert_eq!(t.len(), mark);
        let z = t.mul(x, x).unwrap();
        assert_eq!(z, y);
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_is_linear() {
        let build = |t: &mut Tape, which: u8| {
            let x = t.leaf(Tensor::vector(vec![0.3, -0.7, 1.1]));
            let a = t.tanh(x);
            let a = t.sum(a);
            let b = t.square(x);
            let b = t.sum(b);
            let out = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(out).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let ga = build(&mut Tape::new(), 0);
        let gb = build(&mut Tape::new(), 1);
        let gs = build(&mut Tape::new(), 2);
        for i in 0..3 {
            assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn conv_shape_follows_floor_formula(h in 1usize..20, w in 1usize..20, k in 1usize..6, stride in 1usize..4, pad in 0usize..3) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::zeros(&[h, w]));
            let kk = t.constant(Tensor::zeros(&[k, k]));
            match t.conv2d(x, kk, stride, pad) {
                Ok(y) => {
                    proptest::prop_assert_eq!(t.shape(y), &[(h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
                    proptest::prop_assert_eq!(conv_output_len(h, k, stride, pad), Some((h + 2 * pad - k) / stride + 1));
                }
                Err(_) => proptest::prop_assert!(h + 2 * pad < k || w + 2 * pad < k),
            }
        }
    }
}
