//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation checks its input
//! shapes, computes its output eagerly, rejects non-finite results and
//! records enough state to run its vector-Jacobian product later.
//! [`Graph::backward`] walks the tape in exact reverse insertion order and
//! *adds* the resulting gradients to each node's gradient buffer, so two
//! calls without [`Graph::zero_grad`] double every gradient.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Conv2d,
    AvgPool2,
    Relu,
    Dense,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    L2Normalize,
    SoftmaxCrossEntropy,
    ConcatCols,
    ConcatRows,
    Reshape,
    /// Scalar-valued op whose Jacobian was computed during the forward pass.
    Fused,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2 => "avgpool2",
            OpKind::Relu => "relu",
            OpKind::Dense => "dense",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Reshape => "reshape",
            OpKind::Fused => "fused",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 18] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::Transpose,
            OpKind::Conv2d,
            OpKind::AvgPool2,
            OpKind::Relu,
            OpKind::Dense,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Sum,
            OpKind::Mean,
            OpKind::L2Normalize,
            OpKind::SoftmaxCrossEntropy,
            OpKind::ConcatCols,
            OpKind::ConcatRows,
            OpKind::Reshape,
            OpKind::Fused,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernels: Var, stride: usize },
    AvgPool2(Var),
    Relu(Var),
    Dense { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    L2Normalize(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Fused { input: Var, jacobian: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::Relu(_) => OpKind::Relu,
            Op::Dense { .. } => OpKind::Dense,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Fused { .. } => OpKind::Fused,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::AvgPool2(a)
            | Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Normalize(a)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Fused { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Minimum Euclidean norm accepted by [`Graph::l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a` is m×k, `b` is n×k; returns a·bᵀ (m×n).
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a` is k×m, `b` is k×n; returns aᵀ·b (m×n).
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Index bookkeeping shared by the conv forward and backward passes.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Unfold one c×h×w image into a (c·kh·kw) × (oh·ow) patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = Vec::with_capacity(self.c * self.kh * self.kw * self.oh * self.ow);
        for i in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for oy in 0..self.oh {
                        let row = (i * self.h + oy * self.stride + ky) * self.w + kx;
                        cols.extend((0..self.ow).map(|ox| x[row + ox * self.stride]));
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch-matrix gradient back onto the image.
    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let mut it = cols.iter();
        for i in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for oy in 0..self.oh {
                        let row = (i * self.h + oy * self.stride + ky) * self.w + kx;
                        for ox in 0..self.ow {
                            gx[row + ox * self.stride] += it.next().expect("patch matrix size");
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Split a shape into (batch, channels, height, width) for conv and pooling.
fn image_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} expects c×h×w or n×c×h×w input, got {shape:?}"
        ))),
    }
}

/// Treat a vector as one row, a matrix as rows.
fn row_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => Err(Error::Dimension(format!("{what} expects a vector or matrix, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: corrupt the backward pass of one op kind.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        check_finite(op.kind().name(), &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, shape, value, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients accumulate into it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let n = t.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            requires_grad: true,
            grad: Some(vec![0.0; n]),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.node(v).op.inputs()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite")
    }

    /// Accumulated gradient of the last loss(es) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
            }
        };
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match *self.shape(a) {
            [m, n] => (m, n),
            ref s => return Err(Error::Dimension(format!("transpose of {s:?}"))),
        };
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push(Op::Transpose(a), vec![n, m], out)
    }

    /// Valid-padding cross-correlation. `input` is c×h×w (or n×c×h×w),
    /// `kernels` is c_out×c_in×kh×kw.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        let (n, c, h, w) = image_dims(&ishape, "conv2d")?;
        let [co, ci, kh, kw] = *kshape.as_slice() else {
            return Err(Error::Dimension(format!("conv2d kernels must be 4-d, got {kshape:?}")));
        };
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if ci != c || kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "conv2d kernels {kshape:?} do not fit input {ishape:?}"
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let x = self.value(input);
        let k = self.value(kernels);
        let geo = ConvGeometry { c, h, w, kh, kw, stride, oh, ow };
        let mut out = Vec::with_capacity(n * co * oh * ow);
        for b in 0..n {
            let cols = geo.im2col(&x[b * c * h * w..(b + 1) * c * h * w]);
            out.extend(matmul_raw(k, &cols, co, c * kh * kw, oh * ow));
        }
        let shape = if ishape.len() == 3 { vec![co, oh, ow] } else { vec![n, co, oh, ow] };
        self.push(Op::Conv2d { input, kernels, stride }, shape, out)
    }

    /// Mean over non-overlapping 2×2 windows.
    pub fn avgpool2(&mut self, input: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (n, c, h, w) = image_dims(&ishape, "avgpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("avgpool2 needs even spatial dims, got {ishape:?}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let xp = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    let s = xp[y * w + xx] + xp[y * w + xx + 1] + xp[(y + 1) * w + xx] + xp[(y + 1) * w + xx + 1];
                    out[(p * oh + oy) * ow + ox] = s / 4.0;
                }
            }
        }
        let mut shape = ishape;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.push(Op::AvgPool2(input), shape, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape, out)
    }

    /// `x·W + b` with `x` of shape [in] or [n, in], `W` [in, out], `b` [out].
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, din) = row_dims(&xs, "dense")?;
        let (wi, wo) = match *self.shape(w) {
            [i, o] => (i, o),
            ref s => return Err(Error::Dimension(format!("dense weight must be 2-d, got {s:?}"))),
        };
        if wi != din || self.shape(b) != [wo] {
            return Err(Error::Dimension(format!(
                "dense input {xs:?} with weight {:?} and bias {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = matmul_raw(self.value(x), self.value(w), n, din, wo);
        let bias = self.value(b);
        for row in out.chunks_mut(wo) {
            add_into(row, bias);
        }
        let shape = if xs.len() == 1 { vec![wo] } else { vec![n, wo] };
        self.push(Op::Dense { x, w, b }, shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), vec![1], vec![s])
    }

    /// Scale a vector (or every row of a matrix) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = row_dims(&shape, "l2_normalize")?;
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if !(norm > MIN_NORM) {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize row {r} has norm {norm:e}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(Op::L2Normalize(x), shape, out)
    }

    /// Mean softmax cross-entropy of `logits` (one row per target) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (n, c) = row_dims(&shape, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {n} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target index {t} out of range for {c} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = libm::exp(v - m);
                z += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += m + libm::log(z) - row[t];
        }
        loss /= n as f64;
        self.push(
            Op::SoftmaxCrossEntropy { logits, probs, targets: targets.to_vec() },
            vec![1],
            vec![loss],
        )
    }

    /// Concatenate matrices (or vectors, as single rows) along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| row_dims(self.shape(p), "concat_cols")).collect::<Result<_>>()?;
        let n = dims[0].0;
        if dims.iter().any(|&(r, _)| r != n) {
            return Err(Error::Dimension(format!("concat_cols row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &(_, d)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p)[r * d..(r + 1) * d]);
            }
        }
        let vector = self.shape(parts[0]).len() == 1;
        let shape = if vector { vec![total] } else { vec![n, total] };
        self.push(Op::ConcatCols(parts.to_vec()), shape, out)
    }

    /// Concatenate tensors along their leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat_rows trailing shape {:?} vs {tail:?}",
                    &s[1..]
                )));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(Op::ConcatRows(parts.to_vec()), shape, out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Dimension(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape(x), shape, out)
    }

    /// Record a scalar computed outside the graph together with its gradient
    /// with respect to `input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, jacobian: Vec<f64>) -> Result<Var> {
        if jacobian.len() != self.value(input).len() {
            return Err(Error::Dimension("fused scalar jacobian length mismatch".into()));
        }
        check_finite("fused", &jacobian)?;
        self.push(Op::Fused { input, jacobian }, vec![1], vec![value])
    }

    /// Accumulate d`loss`/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contribs = self.vjp(id, &g);
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
            for (input, mut contrib) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if self.fault == Some(self.nodes[id].op.kind()) {
                    contrib.iter_mut().for_each(|v| *v *= 1.5);
                }
                match grads[input.0].as_mut() {
                    Some(acc) => add_into(acc, &contrib),
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let ga = matmul_bt(g, self.value(*b), m, n, k);
                let gb = matmul_at(self.value(*a), g, m, k, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Conv2d { input, kernels, stride } => {
                let (n, c, h, w) = image_dims(self.shape(*input), "conv2d").expect("checked in forward");
                let ks = self.shape(*kernels);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let geo = ConvGeometry { c, h, w, kh, kw, stride: *stride, oh: (h - kh) / stride + 1, ow: (w - kw) / stride + 1 };
                let (ckk, ohw) = (c * kh * kw, geo.oh * geo.ow);
                let x = self.value(*input);
                let k = self.value(*kernels);
                let need_x = self.node(*input).requires_grad;
                let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gk = vec![0.0; k.len()];
                for b in 0..n {
                    let gb = &g[b * co * ohw..(b + 1) * co * ohw];
                    let cols = geo.im2col(&x[b * c * h * w..(b + 1) * c * h * w]);
                    add_into(&mut gk, &matmul_bt(gb, &cols, co, ohw, ckk));
                    if need_x {
                        let gcols = matmul_at(k, gb, co, ckk, ohw);
                        geo.col2im_add(&gcols, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                }
                let mut out = vec![(*kernels, gk)];
                if need_x {
                    out.push((*input, gx));
                }
                out
            }
            Op::AvgPool2(a) => {
                let (n, c, h, w) = image_dims(self.shape(*a), "avgpool2").expect("checked in forward");
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            ga[(p * h + y) * w + x] = g[(p * oh + y / 2) * ow + x / 2] / 4.0;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let ga = self.value(*a).iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
                vec![(*a, ga)]
            }
            Op::Dense { x, w, b } => {
                let (n, din) = row_dims(self.shape(*x), "dense").expect("checked in forward");
                let dout = self.shape(*w)[1];
                let gx = matmul_bt(g, self.value(*w), n, dout, din);
                let gw = matmul_at(self.value(*x), g, n, din, dout);
                let mut gb = vec![0.0; dout];
                for row in g.chunks(dout) {
                    add_into(&mut gb, row);
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = *node.shape.last().expect("non-empty shape");
                let mut ga = vec![0.0; x.len()];
                for r in 0..x.len() / d {
                    let s = r * d..(r + 1) * d;
                    let norm = libm::sqrt(x[s.clone()].iter().map(|v| v * v).sum::<f64>());
                    let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        ga[i] = (g[i] - y[i] * dot) / norm;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::ConcatCols(parts) => {
                let n = if node.shape.len() == 1 { 1 } else { node.shape[0] };
                let total = *node.shape.last().expect("non-empty shape");
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let d = *self.shape(p).last().expect("non-empty shape");
                    let mut gp = Vec::with_capacity(n * d);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + d]);
                    }
                    off += d;
                    out.push((p, gp));
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).len();
                        let gp = g[off..off + len].to_vec();
                        off += len;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Fused { input, jacobian } => {
                vec![(*input, jacobian.iter().map(|j| j * g[0]).collect())]
            }
        }
    }
}

/// Parameters of a [`ParamSet`] bound as trainable leaves of a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind every parameter; with `trainable = false` they become constants.
    pub fn new(graph: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { graph.param(t) } else { graph.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Bind a name to an existing node.
    pub fn insert(&mut self, name: &str, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// Add the graph gradients of bound parameters into `params`.
    pub fn accumulate_into(&self, graph: &Graph, params: &mut ParamSet) {
        for (name, &v) in &self.vars {
            if let (Some(g), Some(t)) = (graph.grad(v), params.get_mut(name)) {
                if let Some(acc) = t.grad_mut() {
                    add_into(acc, g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let i3 = g.constant(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let bv = [1.0, -2.0, 3.5, 0.25, 7.0, -1.0];
        let b = g.constant(&t(&[3, 2], &bv));
        let out = g.matmul(i3, b).unwrap();
        assert_eq!(g.value(out), &bv);
        let a = g.constant(&t(&[1, 1], &[2.0]));
        let c = g.constant(&t(&[1, 1], &[3.0]));
        let p = g.matmul(a, c).unwrap();
        assert_eq!(g.value(p), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let Error::Dimension(msg) = err else { panic!("wrong error") };
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn conv_identity_and_constant() {
        let mut g = Graph::new();
        let xv: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(&t(&[1, 4, 4], &xv));
        let k = g.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y), xv.as_slice());

        let ones = g.constant(&t(&[1, 4, 4], &[1.0; 16]));
        let k2 = g.constant(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let y2 = g.conv2d(ones, k2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 3, 3]);
        assert!(g.value(y2).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![1, 2, 2]));
        let k = g.constant(&Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_stride_output_size() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![2, 7, 7]));
        let k = g.constant(&Tensor::zeros(vec![3, 2, 3, 3]));
        let y = g.conv2d(x, k, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 3]);
    }

    #[test]
    fn avgpool_cases() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.avgpool2(x).unwrap();
        assert_eq!(g.value(y), &[2.5]);
        let c = g.constant(&t(&[2, 4, 4], &[1.75; 32]));
        let yc = g.avgpool2(c).unwrap();
        assert!(g.value(yc).iter().all(|&v| v == 1.75));
        let odd = g.constant(&Tensor::zeros(vec![1, 3, 4]));
        assert!(matches!(g.avgpool2(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert!((g.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((g.value(y)[1] - 0.8).abs() < 1e-15);
        let z = g.constant(&t(&[2], &[0.0, 1e-13]));
        assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        for target in 0..3 {
            let mut g = Graph::new();
            let x = g.constant(&t(&[3], &[0.0, 0.0, 0.0]));
            let l = g.softmax_cross_entropy(x, &[target]).unwrap();
            assert!((g.value(l)[0] - libm::log(3.0)).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        assert!(matches!(g.softmax_cross_entropy(x, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_ce_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[1000.0, 0.0, -1000.0]));
        let l = g.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn backward_identity_and_bilinear() {
        let mut g = Graph::new();
        let x = g.param(&t(&[1], &[2.5]));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let yv = [0.5, -1.0, 3.0];
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.constant(&t(&[3], &yv));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &yv);
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[0.3, -1.7, 2.2]));
        let w = g.param(&t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
        let b = g.param(&t(&[2], &[0.01, -0.02]));
        let h = g.dense(x, w, b).unwrap();
        let r = g.relu(h).unwrap();
        let n = g.l2_normalize(r).unwrap();
        let l = g.softmax_cross_entropy(n, &[1]).unwrap();
        g.backward(l).unwrap();
        let once: Vec<f64> = g.grad(w).unwrap().to_vec();
        g.backward(l).unwrap();
        for (a, b) in once.iter().zip(g.grad(w).unwrap()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1], &[1e300]));
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn op_names_round_trip() {
        for k in [OpKind::Conv2d, OpKind::Dense, OpKind::Fused, OpKind::SoftmaxCrossEntropy] {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
