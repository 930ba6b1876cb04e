//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node whose parents
//! were created earlier, so the node order is already a topological order and
//! the graph cannot contain a cycle. [`Graph::backward`] walks the list once in
//! reverse and accumulates gradients into every `requires_grad` leaf.
//!
//! ```
//! use crossing_intent::graph::Graph;
//! use crossing_intent::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels::{gemm, Layout};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and backward-rule fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Abs,
    Square,
    LayerNorm,
    Softmax,
    Dropout,
    Sum,
    Mean,
    SumLastAxis,
    Reshape,
    Interleave,
    SplitHeads,
    MergeHeads,
    Bmm,
    BceWithLogits,
    ColumnStd,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Square,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLastAxis,
        OpKind::Reshape,
        OpKind::Interleave,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::Bmm,
        OpKind::BceWithLogits,
        OpKind::ColumnStd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastAxis => "sum_last_axis",
            OpKind::Reshape => "reshape",
            OpKind::Interleave => "interleave",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::Bmm => "bmm",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::ColumnStd => "column_std",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: f64,
    },
    AddScalar {
        a: usize,
    },
    Unary {
        kind: Unary,
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumLastAxis {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Interleave {
        parts: Vec<usize>,
        rows: usize,
        width: usize,
    },
    SplitHeads {
        a: usize,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    ColumnStd {
        a: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
        active: Vec<bool>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Unary { kind, .. } => match kind {
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Gelu => OpKind::Gelu,
                Unary::Exp => OpKind::Exp,
                Unary::Log => OpKind::Log,
                Unary::Abs => OpKind::Abs,
                Unary::Square => OpKind::Square,
            },
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumLastAxis { .. } => OpKind::SumLastAxis,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Interleave { .. } => OpKind::Interleave,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::ColumnStd { .. } => OpKind::ColumnStd,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Sigmoid that does not overflow for large negative inputs.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `gelu(x) = 0.5 · x · (1 + tanh(√(2/π) · (x + 0.044715 · x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

// tanh(u) = 1 − 2/(e^{2u} + 1); one exp is noticeably cheaper than libm tanh
// and saturates cleanly at ±1.
fn gelu_tanh(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = gelu_tanh(x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// A single-threaded tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: negate the backward contribution of every `kind` node.
    /// Used to check that the gradient harness catches broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- forward operations -------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::row_major(k, n),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_raw(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// Adds a `[n]` vector to every row of `x` (`[..., n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// `x · W + b` for `x: [N×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() {
            va.shape().to_vec()
        } else if vb.is_scalar() {
            va.shape().to_vec()
        } else if va.is_scalar() {
            vb.shape().to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(name, va.shape(), vb.shape()));
        };
        let n = shape.iter().product::<usize>();
        let (da, db) = (va.data(), vb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Binary { kind, a: a.0, b: b.0 },
            &[a.0, b.0],
        ))
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale { a: a.0, s }, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar { a: a.0 }, &[a.0])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::dim("layer_norm", &sx, &[]));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_raw(sx, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training (or at rate 0) this is the identity and adds no node.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Dropout { a: a.0, mask }, &[a.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Sums the last axis away: `[..., n] → [...]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let out: Vec<f64> = v.data().chunks_exact(d.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        self.push(Tensor::from_raw(shape, out), Op::SumLastAxis { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Stacks `T` tensors of shape `[B×d]` into `[B·T × d]` so that row
    /// `b·T + t` is row `b` of `parts[t]` (token order within each sample).
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("interleave needs at least one part".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 {
            return Err(Error::dim("interleave", &s0, &[]));
        }
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(Error::dim("interleave", &s0, self.shape(*p)));
            }
        }
        let (rows, width, t) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; rows * t * width];
        for (ti, p) in parts.iter().enumerate() {
            let src = self.value(*p).data();
            for b in 0..rows {
                let dst = (b * t + ti) * width;
                out[dst..dst + width].copy_from_slice(&src[b * width..(b + 1) * width]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Tensor::from_raw(vec![rows * t, width], out),
            Op::Interleave {
                parts: idx.clone(),
                rows,
                width,
            },
            &idx,
        ))
    }

    /// `[B·T × h·dk] → [B·h × T × dk]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != batch * tokens || heads == 0 || s[1] % heads != 0 {
            return Err(Error::dim("split_heads", &s, &[batch, tokens, heads]));
        }
        let dk = s[1] / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let from = (b * tokens + t) * s[1] + h * dk;
                    let to = ((b * heads + h) * tokens + t) * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![batch * heads, tokens, dk], out),
            Op::SplitHeads {
                a: a.0,
                batch,
                tokens,
                heads,
            },
            &[a.0],
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(Error::dim("merge_heads", &s, &[batch, tokens, heads]));
        }
        let dk = s[2];
        let d = dk * heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let from = ((b * heads + h) * tokens + t) * dk;
                    let to = (b * tokens + t) * d + h * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![batch * tokens, d], out),
            Op::MergeHeads {
                a: a.0,
                batch,
                tokens,
                heads,
            },
            &[a.0],
        ))
    }

    /// Batched product `[G×m×k] · [G×k×n]`, or `[G×m×k] · [G×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; groups * m * n];
        let lb = if trans_b {
            Layout::transposed(n, k)
        } else {
            Layout::row_major(k, n)
        };
        for g in 0..groups {
            gemm(
                &da[g * m * k..(g + 1) * m * k],
                Layout::row_major(m, k),
                &db[g * k * n..(g + 1) * k * n],
                lb,
                &mut out[g * m * n..(g + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(
            Tensor::from_raw(vec![groups, m, n], out),
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
                groups,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// Mean binary cross-entropy with logits against soft targets in `[0, 1]`,
    /// evaluated as `max(ℓ, 0) − ℓ·t + ln(1 + e^{−|ℓ|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(Error::dim("bce_with_logits", v.shape(), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain {
                op: "bce_with_logits",
                detail: format!("target {t} outside [0, 1]"),
            });
        }
        let loss = bce_with_logits_mean(v.data(), targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            &[logits.0],
        ))
    }

    /// Per-column population standard deviation of `[B×m]`, with the variance
    /// floored at `var_floor`: `sqrt(max(var, var_floor))`.
    pub fn column_std(&mut self, a: Var, var_floor: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("column_std", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += d[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let e = d[r * cols + c] - mean[c];
                var[c] += e * e;
            }
        }
        let mut std = vec![0.0; cols];
        let mut active = vec![false; cols];
        for c in 0..cols {
            let v = var[c] / rows as f64;
            active[c] = v > var_floor;
            std[c] = v.max(var_floor).sqrt();
        }
        Ok(self.push(
            Tensor::from_raw(vec![cols], std.clone()),
            Op::ColumnStd {
                a: a.0,
                mean,
                std,
                active,
            },
            &[a.0],
        ))
    }

    // ----- reverse pass -------------------------------------------------------

    /// Back-propagates from a scalar root. Gradients accumulate into the leaves
    /// across repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(root, seed)
    }

    /// Vector-Jacobian product: back-propagates `seed` (shaped like `root`)
    /// from a root of any shape.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::dim("backward_with", seed.shape(), self.shape(root)));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        // Interior nodes keep no gradient, except the root, which records its seed.
        if !matches!(self.nodes[root.0].op, Op::Leaf) {
            self.nodes[root.0].grad = Some(seed.clone());
        }
        adj[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let mut contribs = self.local_backward(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, t) in &mut contribs {
                    t.scale_in_place(-1.0);
                }
            }
            for (p, t) in contribs {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut adj[p] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its parents given upstream `g`.
    fn local_backward(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut out = Vec::with_capacity(2);
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(gd, Layout::row_major(m, n), val(*b).data(), Layout::transposed(k, n), &mut ga, 0.0);
                    out.push((*a, Tensor::from_raw(vec![m, k], ga)));
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(val(*a).data(), Layout::transposed(m, k), gd, Layout::row_major(m, n), &mut gb, 0.0);
                    out.push((*b, Tensor::from_raw(vec![k, n], gb)));
                }
                out
            }
            Op::AddBias { x, bias } => {
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for row in gd.chunks_exact(n.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_raw(vec![n], gb))]
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let (mut ga, mut gb) = (vec![0.0; gd.len()], vec![0.0; gd.len()]);
                for (idx, &gv) in gd.iter().enumerate() {
                    let (da, db) = match kind {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * at(vb.data(), idx), gv * at(va.data(), idx)),
                    };
                    ga[idx] = da;
                    gb[idx] = db;
                }
                let reduce = |full: Vec<f64>, target: &Tensor| {
                    if target.len() == full.len() {
                        Tensor::from_raw(target.shape().to_vec(), full)
                    } else {
                        Tensor::from_raw(target.shape().to_vec(), vec![full.iter().sum()])
                    }
                };
                vec![(*a, reduce(ga, va)), (*b, reduce(gb, vb))]
            }
            Op::Scale { a, s } => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar { a } => vec![(*a, g.clone())],
            Op::Unary { kind, a } => {
                let x = val(*a).data();
                let y = node.value.data();
                let out: Vec<f64> = (0..gd.len())
                    .map(|j| {
                        let d = match kind {
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Gelu => gelu_grad(x[j]),
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[j],
                        };
                        gd[j] * d
                    })
                    .collect();
                vec![(*a, Tensor::from_raw(g.shape().to_vec(), out))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = val(*gain).data();
                let d = gain_v.len();
                let rows = inv_std.len();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    let mut sum_dx = 0.0;
                    let mut sum_dx_xhat = 0.0;
                    for j in 0..d {
                        let gv = gd[off + j];
                        gg[j] += gv * xhat[off + j];
                        gbias[j] += gv;
                        dxhat[j] = gv * gain_v[j];
                        sum_dx += dxhat[j];
                        sum_dx_xhat += dxhat[j] * xhat[off + j];
                    }
                    let c = inv_std[r] / d as f64;
                    for j in 0..d {
                        gx[off + j] =
                            c * (d as f64 * dxhat[j] - sum_dx - xhat[off + j] * sum_dx_xhat);
                    }
                }
                vec![
                    (*x, Tensor::from_raw(g.shape().to_vec(), gx)),
                    (*gain, Tensor::from_raw(vec![d], gg)),
                    (*bias, Tensor::from_raw(vec![d], gbias)),
                ]
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim().max(1);
                let mut out = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let off = r * d;
                    let dot: f64 = (0..d).map(|j| gd[off + j] * y[off + j]).sum();
                    for j in 0..d {
                        out[off + j] = y[off + j] * (gd[off + j] - dot);
                    }
                }
                vec![(*a, Tensor::from_raw(g.shape().to_vec(), out))]
            }
            Op::Dropout { a, mask } => {
                let out: Vec<f64> = gd.iter().zip(mask).map(|(x, m)| x * m).collect();
                vec![(*a, Tensor::from_raw(g.shape().to_vec(), out))]
            }
            Op::Sum { a } => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean { a } => {
                let n = val(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
            }
            Op::SumLastAxis { a } => {
                let va = val(*a);
                let d = va.last_dim();
                let mut out = vec![0.0; va.len()];
                for (r, &gv) in gd.iter().enumerate() {
                    out[r * d..(r + 1) * d].fill(gv);
                }
                vec![(*a, Tensor::from_raw(va.shape().to_vec(), out))]
            }
            Op::Reshape { a } => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, Tensor::from_raw(shape, gd.to_vec()))]
            }
            Op::Interleave { parts, rows, width } => {
                let t = parts.len();
                parts
                    .iter()
                    .enumerate()
                    .map(|(ti, &p)| {
                        let mut out = vec![0.0; rows * width];
                        for b in 0..*rows {
                            let src = (b * t + ti) * width;
                            out[b * width..(b + 1) * width].copy_from_slice(&gd[src..src + width]);
                        }
                        (p, Tensor::from_raw(vec![*rows, *width], out))
                    })
                    .collect()
            }
            Op::SplitHeads {
                a,
                batch,
                tokens,
                heads,
            } => {
                let d = val(*a).last_dim();
                let dk = d / heads;
                let mut out = vec![0.0; gd.len()];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let to = (b * tokens + t) * d + h * dk;
                            let from = ((b * heads + h) * tokens + t) * dk;
                            out[to..to + dk].copy_from_slice(&gd[from..from + dk]);
                        }
                    }
                }
                vec![(*a, Tensor::from_raw(val(*a).shape().to_vec(), out))]
            }
            Op::MergeHeads {
                a,
                batch,
                tokens,
                heads,
            } => {
                let dk = val(*a).last_dim();
                let d = dk * heads;
                let mut out = vec![0.0; gd.len()];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let to = ((b * heads + h) * tokens + t) * dk;
                            let from = (b * tokens + t) * d + h * dk;
                            out[to..to + dk].copy_from_slice(&gd[from..from + dk]);
                        }
                    }
                }
                vec![(*a, Tensor::from_raw(val(*a).shape().to_vec(), out))]
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; groups * m * k];
                let mut gb = vec![0.0; groups * k * n];
                for gi in 0..*groups {
                    let g_blk = &gd[gi * m * n..(gi + 1) * m * n];
                    let a_blk = &da[gi * m * k..(gi + 1) * m * k];
                    let b_blk = &db[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // out = a · bᵀ with b: [n×k]
                        gemm(g_blk, Layout::row_major(m, n), b_blk, Layout::row_major(n, k), &mut ga[gi * m * k..(gi + 1) * m * k], 0.0);
                        gemm(g_blk, Layout::transposed(m, n), a_blk, Layout::row_major(m, k), &mut gb[gi * k * n..(gi + 1) * k * n], 0.0);
                    } else {
                        gemm(g_blk, Layout::row_major(m, n), b_blk, Layout::transposed(k, n), &mut ga[gi * m * k..(gi + 1) * m * k], 0.0);
                        gemm(a_blk, Layout::transposed(m, k), g_blk, Layout::row_major(m, n), &mut gb[gi * k * n..(gi + 1) * k * n], 0.0);
                    }
                }
                vec![
                    (*a, Tensor::from_raw(val(*a).shape().to_vec(), ga)),
                    (*b, Tensor::from_raw(val(*b).shape().to_vec(), gb)),
                ]
            }
            Op::BceWithLogits { logits, targets } => {
                let l = val(*logits);
                let n = targets.len().max(1) as f64;
                let out: Vec<f64> = l
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(x, t)| gd[0] * (sigmoid(*x) - t) / n)
                    .collect();
                vec![(*logits, Tensor::from_raw(l.shape().to_vec(), out))]
            }
            Op::ColumnStd {
                a,
                mean,
                std,
                active,
            } => {
                let va = val(*a);
                let cols = mean.len();
                let rows = va.len() / cols.max(1);
                let d = va.data();
                let mut out = vec![0.0; va.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        if active[c] {
                            out[r * cols + c] =
                                gd[c] * (d[r * cols + c] - mean[c]) / (rows as f64 * std[c]);
                        }
                    }
                }
                vec![(*a, Tensor::from_raw(va.shape().to_vec(), out))]
            }
        }
    }
}

/// Mean stable BCE-with-logits on plain slices.
pub fn bce_with_logits_mean(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(w ⊙ op(x)))/dx against finite differences, for a fixed
    /// random weighting `w` so the upstream gradient is not uniform.
    fn check_unary_op(shape: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut rng = RngStream::new(11);
        let x0 = random(shape, &mut rng);
        let out_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x0.clone());
            let y = build(&mut g, xv);
            g.shape(y).to_vec()
        };
        let w = random(&out_shape, &mut rng);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = build(&mut g, xv);
            g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let y = build(&mut g, xv);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let num = numeric_grad(&x0, &eval, 1e-5);
        let err = max_rel_err(g.grad(xv).unwrap().data(), &num);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let p = g.matmul(m, col).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let a0 = random(&[3, 4], &mut rng);
        let b0 = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // d sum(AB)/dA = 1·Bᵀ
        let expected: Vec<f64> = (0..3)
            .flat_map(|_| (0..4).map(|k| b0.row(k).iter().sum::<f64>()).collect::<Vec<_>>())
            .collect();
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let b = g.constant(b0.clone());
            let c = g.matmul(a, b).unwrap();
            g.value(c).sum()
        };
        let num = numeric_grad(&a0, &f, 1e-5);
        assert!(max_rel_err(g.grad(a).unwrap().data(), &num) < 1e-6);
        assert!(max_rel_err(g.grad(a).unwrap().data(), &expected) < 1e-12);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let ge = g.gelu(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(ge).item(), 0.0);
    }

    #[test]
    fn sigmoid_derivative_at_one_point_five() {
        let x0 = 1.5;
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(x0));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        let h = 1e-5;
        let num = (sigmoid(x0 + h) - sigmoid(x0 - h)) / (2.0 * h);
        assert!((g.grad(x).unwrap().item() - num).abs() < 1e-6);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn unary_gradients() {
        check_unary_op(&[3, 5], &|g, x| g.sigmoid(x), 1e-6);
        check_unary_op(&[3, 5], &|g, x| g.gelu(x), 1e-6);
        check_unary_op(&[3, 5], &|g, x| g.exp(x), 1e-6);
        check_unary_op(&[3, 5], &|g, x| g.square(x), 1e-6);
        check_unary_op(&[3, 5], &|g, x| g.scale(x, -2.5), 1e-6);
        check_unary_op(&[3, 5], &|g, x| {
            let e = g.exp(x);
            g.log(e).unwrap()
        }, 1e-6);
        check_unary_op(&[2, 6], &|g, x| g.softmax(x), 1e-5);
        check_unary_op(&[4, 3], &|g, x| g.sum_last_axis(x), 1e-6);
        check_unary_op(&[4, 3], &|g, x| g.column_std(x, 1e-8).unwrap(), 1e-5);
        check_unary_op(&[6, 4], &|g, x| g.split_heads(x, 2, 3, 2).unwrap(), 1e-6);
        check_unary_op(&[4, 3, 2], &|g, x| g.merge_heads(x, 2, 3, 2).unwrap(), 1e-6);
        check_unary_op(&[2, 3, 4], &|g, x| g.bmm(x, x, true).unwrap(), 1e-6);
    }

    #[test]
    fn layer_norm_hand_case_and_constant_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-3);
        }
        let c = g.constant(t(&[4], &[7.0; 4]));
        let gain4 = g.constant(Tensor::ones(&[4]));
        let bias4 = g.constant(Tensor::zeros(&[4]));
        let yc = g.layer_norm(c, gain4, bias4, 1e-5).unwrap();
        assert!(g.value(yc).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_empty_last_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        let gain = g.constant(Tensor::zeros(&[0]));
        let bias = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.layer_norm(x, gain, bias, 1e-5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_gradient_all_inputs() {
        let mut rng = RngStream::new(17);
        let x0 = random(&[2, 4], &mut rng);
        let g0 = random(&[4], &mut rng);
        let b0 = random(&[4], &mut rng);
        let w = random(&[2, 4], &mut rng);
        let f = |x: &Tensor, gain: &Tensor, bias: &Tensor| {
            let mut g = Graph::new();
            let (x, gn, bs) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(x, gn, bs, 1e-5).unwrap();
            g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let (x, gn, bs) = (g.param(x0.clone()), g.param(g0.clone()), g.param(b0.clone()));
        let y = g.layer_norm(x, gn, bs, 1e-5).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let nx = numeric_grad(&x0, &|x| f(x, &g0, &b0), 1e-5);
        let ng = numeric_grad(&g0, &|gn| f(&x0, gn, &b0), 1e-5);
        let nb = numeric_grad(&b0, &|bs| f(&x0, &g0, bs), 1e-5);
        assert!(max_rel_err(g.grad(x).unwrap().data(), &nx) < 1e-5);
        assert!(max_rel_err(g.grad(gn).unwrap().data(), &ng) < 1e-5);
        assert!(max_rel_err(g.grad(bs).unwrap().data(), &nb) < 1e-5);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let s = g.softmax(z);
        assert!(g.value(s).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big);
        let d = g.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300 && d[1] >= 0.0);
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = RngStream::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[10]));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(g.dropout(x, -0.1, true, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = RngStream::new(2);
        let n = 100_000;
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[n]));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let d = g.value(y).data();
        let survivors = d.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        let mean = d.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn backward_simple_cases_and_accumulation() {
        let x0 = t(&[3], &[1.0, -2.0, 0.5]);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let xx = g.mul(x, x).unwrap();
        let j = g.sum(xx);
        g.backward(j).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn root_gradient_is_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn scalar_broadcast_gradient_reduces() {
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(2.0));
        let v = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let p = g.mul(s, v).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap().item(), 6.0);
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_values_and_gradient() {
        assert!((bce_with_logits_mean(&[0.0], &[0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_with_logits_mean(&[40.0], &[1.0]) < 1e-15);
        assert!(bce_with_logits_mean(&[1000.0, -1000.0], &[1.0, 0.0]).is_finite());
        let l0 = t(&[3], &[0.3, -1.2, 2.0]);
        let tg = [0.95, 0.05, 0.68];
        let mut g = Graph::new();
        let l = g.param(l0.clone());
        let loss = g.bce_with_logits(l, &tg).unwrap();
        g.backward(loss).unwrap();
        let num = numeric_grad(&l0, &|x| bce_with_logits_mean(x.data(), &tg), 1e-5);
        assert!(max_rel_err(g.grad(l).unwrap().data(), &num) < 1e-6);
        let analytic: Vec<f64> = l0.data().iter().zip(tg).map(|(x, t)| (sigmoid(*x) - t) / 3.0).collect();
        assert!(max_rel_err(g.grad(l).unwrap().data(), &analytic) < 1e-12);
    }

    #[test]
    fn interleave_orders_tokens_within_sample() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[10.0, 20.0]));
        let s = g.interleave(&[a, b]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn injected_fault_flips_gradient() {
        let mut g = Graph::new();
        g.inject_backward_fault(OpKind::Sigmoid);
        let x = g.param(Tensor::scalar(0.3));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().item() < 0.0);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
