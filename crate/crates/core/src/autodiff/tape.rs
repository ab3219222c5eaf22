//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and a record of
//! its operands. `backward` walks the nodes once in reverse order. Operands
//! always precede their results, so the node order is a topological order.
//! A non-finite forward result is an error rather than a propagated value.

use std::sync::Arc;

use super::sparse::SparseMap;
use super::tensor::{validate_shape, Tensor};
use crate::error::{shape_err, CscError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused op with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per operand, each the operand's length.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSumExp(Var),
    SqL2(Var, Var),
    Dot(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, offset: usize },
    Reshape(Var),
    Linear(Var, Arc<SparseMap>),
    LayerNormRows { src: Var, inv_std: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | AddRowVec(a, b)
            | MulRowVec(a, b) | SqL2(a, b) | Dot(a, b) | ConcatCols(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Sigmoid(a) | Tanh(a)
            | Relu(a) | Softplus(a) | Sqrt(a) | Sum(a) | Mean(a) | SoftmaxRows(a)
            | LogSumExp(a) | Reshape(a) | Linear(a, _) => vec![*a],
            SliceRows { src, .. } | LayerNormRows { src, .. } => vec![*src],
            ConcatRows(vs) | Custom { inputs: vs, .. } => vs.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sum(exp(v)))`, written as `m + ln_1p(sum_{i != argmax} exp(v_i - m))`
/// so that a single dominant term keeps full relative precision.
pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let (imax, m) = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    if m == f64::NEG_INFINITY {
        return m;
    }
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    m + rest.ln_1p()
}

pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[m×k] = a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, format!("expected a matrix, got {shape:?}"))),
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("tape node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(CscError::NonFinite { op: name });
        }
        let needs_grad = op.operands().iter().any(|o| self.nodes[o.0].needs_grad);
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Result<Var> {
        validate_shape("leaf", &shape, value.len())?;
        if !value.iter().all(|x| x.is_finite()) {
            return Err(CscError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { shape, value, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a gradient-tracking leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.push_leaf(shape.to_vec(), data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(&[1], vec![v])
    }

    /// A copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_leaf(shape, value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let value = gemm_nn(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `a * s` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scale operand has shape {:?}", self.shape(s))));
        }
        let c = self.scalar(s);
        self.unary("mul_scalar", a, |x| c * x, Op::MulScalar(a, s))
    }

    fn rowvec_check(&self, op: &'static str, m: Var, v: Var) -> Result<usize> {
        let c = *self.shape(m).last().unwrap();
        if self.value(v).len() != c {
            return Err(shape_err(op, format!("row vector of len {} vs {} columns", self.value(v).len(), c)));
        }
        Ok(c)
    }

    /// Adds `v` to every row (last axis) of `m`.
    pub fn add_rowvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let c = self.rowvec_check("add_rowvec", m, v)?;
        let vv = self.value(v);
        let value = self.value(m).iter().enumerate().map(|(i, x)| x + vv[i % c]).collect();
        let shape = self.shape(m).to_vec();
        self.push("add_rowvec", shape, value, Op::AddRowVec(m, v))
    }

    /// Multiplies every row (last axis) of `m` elementwise by `v`.
    pub fn mul_rowvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let c = self.rowvec_check("mul_rowvec", m, v)?;
        let vv = self.value(v);
        let value = self.value(m).iter().enumerate().map(|(i, x)| x * vv[i % c]).collect();
        let shape = self.shape(m).to_vec();
        self.push("mul_rowvec", shape, value, Op::MulRowVec(m, v))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, stable_softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a))
    }

    /// Row-wise softmax of a matrix, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("softmax_rows", self.shape(a))?;
        let src = self.value(a);
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            value.extend(softmax_slice(&src[i * c..(i + 1) * c]));
        }
        self.push("softmax_rows", vec![r, c], value, Op::SoftmaxRows(a))
    }

    /// `log(sum(exp(v)))` over all elements of `v`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let s = logsumexp_slice(self.value(a));
        self.push("logsumexp", vec![1], vec![s], Op::LogSumExp(a))
    }

    /// Squared Euclidean distance between two same-shape tensors.
    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_l2", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push("sq_l2", vec![1], vec![s], Op::SqL2(a, b))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push("dot", vec![1], vec![s], Op::Dot(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ca) = dims2("concat_cols", self.shape(a))?;
        let (r2, cb) = dims2("concat_cols", self.shape(b))?;
        if r != r2 {
            return Err(shape_err("concat_cols", format!("row counts {r} vs {r2}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            value.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        self.push("concat_cols", vec![r, ca + cb], value, Op::ConcatCols(a, b))
    }

    /// Concatenation along axis 0; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "no operands"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {:?}", s, tail)));
            }
            rows += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", shape, value, Op::ConcatRows(parts.to_vec()))
    }

    /// `len` consecutive entries along axis 0, starting at `start`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s[0] || len == 0 {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {:?}", start + len, s)));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let value = self.value(a)[start * inner..(start + len) * inner].to_vec();
        self.push("slice_rows", shape, value, Op::SliceRows { src: a, offset: start * inner })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        validate_shape("reshape", shape, self.value(a).len())?;
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a))
    }

    pub fn linear_map(&mut self, a: Var, map: Arc<SparseMap>) -> Result<Var> {
        if map.in_len() != self.value(a).len() {
            return Err(shape_err("linear_map", format!("map expects {} inputs, got {}", map.in_len(), self.value(a).len())));
        }
        let value = map.apply(self.value(a));
        let shape = map.out_shape().to_vec();
        self.push("linear_map", shape, value, Op::Linear(a, map))
    }

    /// Normalizes every row (last axis) to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        let src = self.value(a);
        let rows = src.len() / c;
        let mut value = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in src.chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            value.extend(row.iter().map(|x| (x - mu) * is));
        }
        let shape = self.shape(a).to_vec();
        self.push("layer_norm_rows", shape, value, Op::LayerNormRows { src: a, inv_std })
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], value: Vec<f64>, op: Arc<dyn CustomOp>) -> Result<Var> {
        validate_shape(op.name(), shape, value.len())?;
        let name = op.name();
        self.push(name, shape.to_vec(), value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CscError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    let d = gemm_nt(g, self.value(*b), m, n, k);
                    ga.iter_mut().zip(d).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let vb = self.value(*b);
                    ga.iter_mut().zip(g).zip(vb).for_each(|((x, d), v)| *x += d * v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let va = self.value(*a);
                    gb.iter_mut().zip(g).zip(va).for_each(|((x, d), v)| *x += d * v);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.scalar(*s);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(self.value(*a)).map(|(d, v)| d * v).sum::<f64>();
                }
            }
            Op::AddRowVec(m, v) => {
                let c = self.value(*v).len();
                if let Some(gm) = self.acc(grads, *m) {
                    gm.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gv) = self.acc(grads, *v) {
                    for (i, d) in g.iter().enumerate() {
                        gv[i % c] += d;
                    }
                }
            }
            Op::MulRowVec(m, v) => {
                let c = self.value(*v).len();
                if let Some(gm) = self.acc(grads, *m) {
                    let vv = self.value(*v);
                    for (i, (x, d)) in gm.iter_mut().zip(g).enumerate() {
                        *x += d * vv[i % c];
                    }
                }
                if let Some(gv) = self.acc(grads, *v) {
                    let vm = self.value(*m);
                    for (i, d) in g.iter().enumerate() {
                        gv[i % c] += d * vm[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((x, d), y)| *x += d * y);
                }
            }
            Op::Ln(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let va = self.value(*a);
                    ga.iter_mut().zip(g).zip(va).for_each(|((x, d), v)| *x += d / v);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((x, d), y)| *x += d * y * (1.0 - y));
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((x, d), y)| *x += d * (1.0 - y * y));
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let va = self.value(*a);
                    ga.iter_mut().zip(g).zip(va).for_each(|((x, d), v)| {
                        if *v > 0.0 {
                            *x += d
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let va = self.value(*a);
                    ga.iter_mut().zip(g).zip(va).for_each(|((x, d), v)| *x += d * stable_sigmoid(*v));
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((x, d), y)| *x += d * 0.5 / y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::SoftmaxRows(a) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), xr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let w = softmax_slice(self.value(*a));
                    ga.iter_mut().zip(w).for_each(|(x, w)| *x += g[0] * w);
                }
            }
            Op::SqL2(a, b) => {
                let diff: Vec<f64> = self.value(*a).iter().zip(self.value(*b)).map(|(x, y)| 2.0 * (x - y) * g[0]).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&diff).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Dot(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let vb = self.value(*b);
                    ga.iter_mut().zip(vb).for_each(|(x, v)| *x += g[0] * v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let va = self.value(*a);
                    gb.iter_mut().zip(va).for_each(|(x, v)| *x += g[0] * v);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, gr) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                        row.iter_mut().zip(&gr[..ca]).for_each(|(x, d)| *x += d);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (row, gr) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                        row.iter_mut().zip(&gr[ca..]).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, d)| *x += d);
                    }
                    off += n;
                }
            }
            Op::SliceRows { src, offset } => {
                if let Some(gs) = self.acc(grads, *src) {
                    gs[*offset..*offset + g.len()].iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Linear(a, map) => {
                if let Some(ga) = self.acc(grads, *a) {
                    map.apply_transpose_into(g, ga);
                }
            }
            Op::LayerNormRows { src, inv_std } => {
                let c = *self.shape(*src).last().unwrap();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gs[r * c + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let parts = op.backward(&vals, y, g);
                for (v, d) in inputs.iter().zip(parts) {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(d).for_each(|(x, d)| *x += d);
                    }
                }
            }
        }
    }
}
