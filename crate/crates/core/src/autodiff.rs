//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to apply its backward rule. Nodes only ever reference earlier
//! nodes, so walking the tape in reverse visits each node after all of its
//! consumers. A tape supports exactly one backward pass.
//!
//! Elementwise binary operations broadcast with trailing-dimension (numpy)
//! semantics: shapes are right-aligned and a dimension of size 1 stretches to
//! match the other operand.
//!
//! `max` routes the gradient of each output element to the first (lowest
//! flat index) maximal input element when there are ties.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A scalar function together with its derivative, both evaluated at the
/// input. `param` is passed through to both as their second argument.
#[derive(Clone, Copy, Debug)]
pub struct ScalarFn {
    pub name: &'static str,
    pub f: fn(f64, f64) -> f64,
    pub df: fn(f64, f64) -> f64,
    pub param: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Acos,
    Abs,
    Powf(f64),
    Relu,
    /// tanh approximation of GELU.
    Gelu,
    Sigmoid,
    LeakyRelu(f64),
    Scale(f64),
    Offset(f64),
    Map(ScalarFn),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Slack allowed on the arccos domain before it is reported as an error.
/// Inputs within the slack are clamped to [-1, 1].
pub const ACOS_TOLERANCE: f64 = 1e-12;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Matmul(Var, Var),
    Reduce {
        kind: ReduceOp,
        input: Var,
        /// For each input element, the output element it contributes to.
        route: Vec<usize>,
        /// Max only: for each output element, the winning input element.
        argmax: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Gather(Var, Arc<[isize]>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: "result is not finite".into(),
        })
    }
}

/// Broadcast shape of two operands under trailing-dimension rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the source element in
/// an operand of shape `src` broadcast to `out_shape`.
fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

/// Source lookup for one operand of a broadcasting binary op.
enum Bcast {
    Same,
    /// The operand's elements repeat with this period (trailing-axis broadcast).
    Cycle(usize),
    Table(Vec<usize>),
}

impl Bcast {
    fn new(src: &[usize], out_shape: &[usize]) -> Self {
        if src == out_shape {
            return Bcast::Same;
        }
        let trimmed: &[usize] = {
            let lead = src.iter().take_while(|&&d| d == 1).count();
            &src[lead..]
        };
        if out_shape.ends_with(trimmed) {
            return Bcast::Cycle(numel(trimmed));
        }
        Bcast::Table(broadcast_index(src, out_shape))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Table(t) => t[i],
        }
    }
}

fn unary_forward(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Sin => x.sin(),
        UnaryOp::Cos => x.cos(),
        UnaryOp::Acos => x.clamp(-1.0, 1.0).acos(),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Powf(p) => x.powf(p),
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        UnaryOp::Scale(s) => s * x,
        UnaryOp::Offset(c) => x + c,
        UnaryOp::Map(sf) => (sf.f)(x, sf.param),
    }
}

/// Derivative of the unary op given input `x` and output `y`.
fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Neg => -1.0,
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::Sin => x.cos(),
        UnaryOp::Cos => -x.sin(),
        UnaryOp::Acos => {
            let c = x.clamp(-1.0, 1.0);
            -1.0 / (1.0 - c * c).sqrt()
        }
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Powf(p) => p * x.powf(p - 1.0),
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Gelu => {
            let inner = GELU_K * (x + GELU_C * x * x * x);
            let t = inner.tanh();
            let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        }
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        UnaryOp::Scale(s) => s,
        UnaryOp::Offset(_) => 1.0,
        UnaryOp::Map(sf) => (sf.df)(x, sf.param),
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

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Sin => "sin",
        UnaryOp::Cos => "cos",
        UnaryOp::Acos => "arccos",
        UnaryOp::Abs => "abs",
        UnaryOp::Powf(_) => "pow",
        UnaryOp::Relu => "relu",
        UnaryOp::Gelu => "gelu",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::LeakyRelu(_) => "leaky_relu",
        UnaryOp::Scale(_) => "scale",
        UnaryOp::Offset(_) => "offset",
        UnaryOp::Map(sf) => sf.name,
    }
}

fn unary_domain_check(op: UnaryOp, data: &[f64]) -> Result<()> {
    let bad = |detail: String| Error::Domain {
        op: unary_name(op),
        detail,
    };
    match op {
        UnaryOp::Log => {
            if let Some(v) = data.iter().find(|v| **v <= 0.0) {
                return Err(bad(format!("log of non-positive value {v}")));
            }
        }
        UnaryOp::Sqrt => {
            if let Some(v) = data.iter().find(|v| **v < 0.0) {
                return Err(bad(format!("sqrt of negative value {v}")));
            }
        }
        UnaryOp::Acos => {
            if let Some(v) = data.iter().find(|v| v.abs() > 1.0 + ACOS_TOLERANCE) {
                return Err(bad(format!("arccos argument {v} outside [-1, 1]")));
            }
        }
        _ => {}
    }
    Ok(())
}

/// c[m,n] += a[m,k] * b[k,n]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop pipelines.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .map(|(a, b)| a * b)
        .sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// da[m,k] += dc[m,n] * b[k,n]^T
fn gemm_nt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(dcrow, &b[p * n..(p + 1) * n]);
        }
    }
}

fn binary_backward_same_lhs(op: BinaryOp, g: &[f64], b: &[f64], ga: &mut [f64]) {
    match op {
        BinaryOp::Add | BinaryOp::Sub => ga.iter_mut().zip(g).for_each(|(d, g)| *d += g),
        BinaryOp::Mul => ga
            .iter_mut()
            .zip(g)
            .zip(b)
            .for_each(|((d, g), b)| *d += g * b),
        BinaryOp::Div => ga
            .iter_mut()
            .zip(g)
            .zip(b)
            .for_each(|((d, g), b)| *d += g / b),
    }
}

fn binary_backward_same_rhs(op: BinaryOp, g: &[f64], a: &[f64], b: &[f64], gb: &mut [f64]) {
    match op {
        BinaryOp::Add => gb.iter_mut().zip(g).for_each(|(d, g)| *d += g),
        BinaryOp::Sub => gb.iter_mut().zip(g).for_each(|(d, g)| *d -= g),
        BinaryOp::Mul => gb
            .iter_mut()
            .zip(g)
            .zip(a)
            .for_each(|((d, g), a)| *d += g * a),
        BinaryOp::Div => gb
            .iter_mut()
            .zip(g)
            .zip(a.iter().zip(b))
            .for_each(|((d, g), (a, b))| *d -= g * a / (b * b)),
    }
}

/// db[k,n] += a[m,k]^T * dc[m,n]
fn gemm_tn(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(dcrow) {
                *d += av * g;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    b_shared: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_shared = b_batch.is_empty();
    if !b_shared && a_batch != b_batch {
        return Err(mismatch());
    }
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    Ok((
        MatmulDims {
            batch: numel(a_batch),
            b_shared,
            m,
            k,
            n,
        },
        out,
    ))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It is differentiable when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Records a copy of `v`'s value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let input = &self.nodes[x.0].value;
        unary_domain_check(op, input.data())?;
        let data: Vec<f64> = input.data().iter().map(|&v| unary_forward(op, v)).collect();
        ensure_finite(unary_name(op), &data)?;
        let value = Tensor::from_parts(input.shape().to_vec(), data);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Unary(op, x), needs))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        if op == BinaryOp::Div && tb.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (ta.shape().to_vec(), data)
        } else {
            let shape =
                broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })?;
            let ia = Bcast::new(ta.shape(), &shape);
            let ib = Bcast::new(tb.shape(), &shape);
            let data = (0..numel(&shape))
                .map(|i| f(ta.data()[ia.at(i)], tb.data()[ib.at(i)]))
                .collect();
            (shape, data)
        };
        ensure_finite(name, &data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(op, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Cos, x)
    }
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Acos, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryOp::Powf(p), x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), x)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(s), x)
    }
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Offset(c), x)
    }
    pub fn map(&mut self, x: Var, f: ScalarFn) -> Result<Var> {
        self.unary(UnaryOp::Map(f), x)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes. `b` is either 2-D (shared by
    /// every batch entry of `a`) or has the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (d, shape) = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&shape)];
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for bi in 0..d.batch {
            let boff = if d.b_shared { 0 } else { bi * sb };
            gemm(
                &ta.data()[bi * sa..(bi + 1) * sa],
                &tb.data()[boff..boff + sb],
                &mut out[bi * sc..(bi + 1) * sc],
                d.m,
                d.k,
                d.n,
            );
        }
        ensure_finite("matmul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul(a, b), needs))
    }

    // ---- reductions --------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceOp, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis {
                    op: "reduce",
                    axis: ax,
                    rank,
                });
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = (0..rank)
            .map(|i| if reduced[i] { 1 } else { in_shape[i] })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            (0..rank)
                .filter(|&i| !reduced[i])
                .map(|i| in_shape[i])
                .collect()
        };
        let route = {
            // Map each input element onto its output slot.
            let kept_strides = strides(&kept);
            let mut eff = vec![0usize; rank];
            for i in 0..rank {
                if !reduced[i] {
                    eff[i] = kept_strides[i];
                }
            }
            let total = numel(&in_shape);
            let mut out = Vec::with_capacity(total);
            let mut counter = vec![0usize; rank];
            let mut flat = 0usize;
            for _ in 0..total {
                out.push(flat);
                for d in (0..rank).rev() {
                    counter[d] += 1;
                    flat += eff[d];
                    if counter[d] < in_shape[d] {
                        break;
                    }
                    flat -= eff[d] * counter[d];
                    counter[d] = 0;
                }
            }
            out
        };
        let n_out = numel(&out_shape);
        let count = numel(&in_shape) / n_out;
        let data = self.data(x);
        let mut out = vec![0.0; n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (i, &o) in route.iter().enumerate() {
                    out[o] += data[i];
                }
                if kind == ReduceOp::Mean {
                    let inv = 1.0 / count as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![0; n_out];
                for (i, &o) in route.iter().enumerate() {
                    if data[i] > out[o] {
                        out[o] = data[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                kind,
                input: x,
                route,
                argmax,
                count,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes, keepdim)
    }
    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes, keepdim)
    }
    pub fn max(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, axes, keepdim)
    }
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if numel(shape) != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Selects input elements by flat index; a negative index yields 0.
    pub fn gather(&mut self, x: Var, index: Arc<[isize]>, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if numel(shape) != index.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index of length {} for shape {shape:?}", index.len()),
            });
        }
        let n = t.len() as isize;
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index {bad} out of range for {n} elements"),
            });
        }
        let data = index
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { t.data()[i as usize] })
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(x, index),
            needs,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..total {
            index.push(flat as isize);
            for d in (0..rank).rev() {
                counter[d] += 1;
                flat += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                flat -= src_strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: "rank below 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                detail: format!(
                    "range {start}..{} outside axis of size {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend((base..base + len * inner).map(|i| i as isize));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index.into(), &out_shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    // ---- fused normalisations ----------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().ok_or(Error::Shape {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x), needs))
    }

    /// Normalises the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().ok_or(Error::Shape {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        ensure_finite("layer_norm", &data)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm { input: x, inv_std },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `root`. Gradients of intermediate and leaf
    /// nodes are then available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.shape(root);
        if numel(root_shape) != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        if !self.needs(root) {
            return Err(Error::RootWithoutGrad);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                if !needs(*x) {
                    return;
                }
                let xin = nodes[x.0].value.data();
                let y = node.value.data();
                let gx = slot(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * unary_derivative(*op, xin[i], y[i]);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out_shape = node.value.shape();
                let ia = Bcast::new(ta.shape(), out_shape);
                let ib = Bcast::new(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                if matches!((&ia, &ib), (Bcast::Same, Bcast::Same)) {
                    if needs(*a) {
                        binary_backward_same_lhs(*op, g, db, slot(grads, nodes, *a));
                    }
                    if needs(*b) {
                        binary_backward_same_rhs(*op, g, da, db, slot(grads, nodes, *b));
                    }
                    return;
                }
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        let (j, k) = (ia.at(i), ib.at(i));
                        ga[j] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * db[k],
                            BinaryOp::Div => gi / db[k],
                        };
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        let (j, k) = (ia.at(i), ib.at(i));
                        gb[k] += match op {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * da[j],
                            BinaryOp::Div => -gi * da[j] / (db[k] * db[k]),
                        };
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (d, _) = matmul_dims(ta.shape(), tb.shape()).expect("validated in forward");
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for bi in 0..d.batch {
                        let boff = if d.b_shared { 0 } else { bi * sb };
                        gemm_nt(
                            &g[bi * sc..(bi + 1) * sc],
                            &tb.data()[boff..boff + sb],
                            &mut ga[bi * sa..(bi + 1) * sa],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    for bi in 0..d.batch {
                        let boff = if d.b_shared { 0 } else { bi * sb };
                        gemm_tn(
                            &ta.data()[bi * sa..(bi + 1) * sa],
                            &g[bi * sc..(bi + 1) * sc],
                            &mut gb[boff..boff + sb],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                }
            }
            Op::Reduce {
                kind,
                input,
                route,
                argmax,
                count,
            } => {
                if !needs(*input) {
                    return;
                }
                let gx = slot(grads, nodes, *input);
                match kind {
                    ReduceOp::Sum => route.iter().enumerate().for_each(|(i, &o)| gx[i] += g[o]),
                    ReduceOp::Mean => {
                        let inv = 1.0 / *count as f64;
                        route
                            .iter()
                            .enumerate()
                            .for_each(|(i, &o)| gx[i] += g[o] * inv)
                    }
                    ReduceOp::Max => argmax.iter().enumerate().for_each(|(o, &i)| gx[i] += g[o]),
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    slot(grads, nodes, *x)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather(x, index) => {
                if !needs(*x) {
                    return;
                }
                let gx = slot(grads, nodes, *x);
                for (o, &i) in index.iter().enumerate() {
                    if i >= 0 {
                        gx[i as usize] += g[o];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    if needs(v) {
                        let gv = slot(grads, nodes, v);
                        for o in 0..outer {
                            let src = &g[o * row + off..o * row + off + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    off += chunk;
                }
            }
            Op::Softmax(x) => {
                if !needs(*x) {
                    return;
                }
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-scalar");
                let gx = slot(grads, nodes, *x);
                for r in 0..y.len() / n {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if !needs(*input) {
                    return;
                }
                let xhat = node.value.data();
                let n = *node.value.shape().last().expect("non-scalar");
                let nf = n as f64;
                let gx = slot(grads, nodes, *input);
                for (r, &is) in inv_std.iter().enumerate() {
                    let (xs, gs) = (&xhat[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += is / nf * (nf * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
            }
        }
    }

    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The gradient of `v` as a tensor shaped like `v`.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let ones = tape.constant(Tensor::ones([2, 2]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn arccos_at_one_is_zero_and_domain_is_checked() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1.0]));
        let y = tape.acos(x).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
        let bad = tape.constant(t(&[1], &[1.01]));
        assert!(matches!(tape.acos(bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn domain_errors_instead_of_infinities() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        let one = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(tape.div(one, z).is_err());
        assert!(tape.log(z).is_err());
        let neg = tape.constant(t(&[1], &[-1.0]));
        assert!(tape.sqrt(neg).is_err());
        let big = tape.constant(t(&[1], &[1e4]));
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn broadcast_bias_row() {
        let mut tape = Tape::new();
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(m, b).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = tape.constant(t(&[2, 1], &[100.0, 200.0]));
        let z = tape.add(m, col).unwrap();
        assert_eq!(tape.data(z), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        let bad = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.add(m, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);
        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(row, col).unwrap();
        assert_eq!(tape.data(d), &[11.0]);
        assert!(tape.matmul(col, col).is_err());
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean_all(v).unwrap();
        assert_eq!(tape.data(m), &[2.5]);
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(a, &[0], false).unwrap();
        assert_eq!(tape.data(s), &[4.0, 6.0]);
        assert!(matches!(
            tape.sum(a, &[2], false),
            Err(Error::InvalidAxis { .. })
        ));
    }

    #[test]
    fn max_ties_route_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([4], 3.0).with_grad());
        let m = tape.max(x, &[0], false).unwrap();
        assert_eq!(tape.data(m), &[3.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.constant(t(&[2], &[5.0, 7.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.exp(x).unwrap();
        let y = tape.add(a, b).unwrap();
        tape.backward(y).unwrap();
        let expected = 3.0 + 2f64.exp();
        assert!((tape.grad(x).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::RootWithoutGrad)));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn permute_and_narrow_and_concat() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2]);
        assert_eq!(tape.data(p), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let n = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.data(n), &[1.0, 2.0, 4.0, 5.0]);
        let c = tape.concat(&[x, n], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(
            tape.data(c),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64).sin() * 3.0));
        let s = tape.softmax(x).unwrap();
        for row in tape.data(s).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
