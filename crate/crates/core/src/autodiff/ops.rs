//! Forward and vector-Jacobian kernels for every primitive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Lower bound applied to L2 norms before dividing.
pub const NORM_FLOOR: f64 = 1e-12;
/// Inputs to `arccos` are clamped to `[-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP]`.
pub const ARCCOS_CLAMP: f64 = 1e-7;
/// Inputs further than this outside `[-1, 1]` are rejected by `arccos`.
pub const ARCCOS_TOLERANCE: f64 = 1e-3;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Spatial padding for `conv2d`. Both keep stride 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Primitive identifier together with its attributes.
///
/// Image tensors are NHWC, convolution kernels are `[kh, kw, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Param(String),
    MatMul,
    Transpose,
    Conv2d { padding: Padding },
    MaxPool { size: usize },
    Relu,
    BatchNorm { eps: f64 },
    /// Elementwise add; the right operand may also be a bias over the last axis.
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    /// Normalizes rows along the last axis.
    L2Normalize,
    Cos,
    Arccos,
    Exp,
    Log,
    Sqrt,
    /// Log-softmax along the last axis.
    LogSoftmax,
    Negate,
    Concat { axis: usize },
    /// `[B, ...] -> [B, prod(...)]`.
    Flatten,
    /// Gathers rows along axis 0.
    SelectRows(Vec<usize>),
    Clamp { lo: f64, hi: f64 },
    /// `[Q, d] x [K, d] -> [Q, K]` squared Euclidean distances.
    PairwiseSqDist,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise_mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::AddScalar(_) => "add_scalar",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::L2Normalize => "l2_normalize",
            Op::Cos => "cos",
            Op::Arccos => "arccos",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::LogSoftmax => "log_softmax",
            Op::Negate => "negate",
            Op::Concat { .. } => "concat",
            Op::Flatten => "flatten",
            Op::SelectRows(_) => "select_rows",
            Op::Clamp { .. } => "clamp",
            Op::PairwiseSqDist => "pairwise_sq_dist",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Constant | Op::Param(_) => Some(0),
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::PairwiseSqDist => Some(2),
            Op::Conv2d { .. } | Op::BatchNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Forward-pass byproducts some gradients need.
#[derive(Clone, Debug, Default)]
pub(crate) enum Aux<T> {
    #[default]
    None,
    BatchNorm { x_hat: Vec<T>, inv_std: Vec<T> },
    ArgMax(Vec<usize>),
}

fn mismatch(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn require_rank<T: Element>(op: &Op, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::domain(
            op.name(),
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Element>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `a[m,k] @ b[k,n]`.
fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, mid, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(a) => {
            let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != a).map(|(_, &d)| d).collect();
            if s.is_empty() {
                s.push(1);
            }
            s
        }
    }
}

struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    out_h: usize,
    out_w: usize,
    pad_t: usize,
    pad_l: usize,
}

fn conv_geometry<T: Element>(op: &Op, padding: Padding, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<ConvGeometry> {
    require_rank(op, x, 4)?;
    require_rank(op, w, 4)?;
    let (batch, h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, wc_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc_in != c_in {
        return Err(mismatch(op, x.shape(), w.shape()));
    }
    if b.shape() != [c_out] {
        return Err(mismatch(op, w.shape(), b.shape()));
    }
    let (out_h, out_w, pad_t, pad_l) = match padding {
        Padding::Same => (h, wd, (kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => {
            if h < kh || wd < kw {
                return Err(mismatch(op, x.shape(), w.shape()));
            }
            (h - kh + 1, wd - kw + 1, 0, 0)
        }
    };
    Ok(ConvGeometry {
        batch,
        h,
        w: wd,
        c_in,
        kh,
        kw,
        c_out,
        out_h,
        out_w,
        pad_t,
        pad_l,
    })
}

impl ConvGeometry {
    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    fn source(o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o + k).checked_sub(pad)?;
        (i < extent).then_some(i)
    }
}

fn conv2d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * g.c_out];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let obase = ((n * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let orow = &mut out[obase..obase + g.c_out];
                orow.copy_from_slice(b);
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.pad_t, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = ConvGeometry::source(ox, kx, g.pad_l, g.w) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * g.c_in;
                        for ci in 0..g.c_in {
                            let xv = x[xbase + ci];
                            let wbase = ((ky * g.kw + kx) * g.c_in + ci) * g.c_out;
                            for (o, &wv) in orow.iter_mut().zip(&w[wbase..wbase + g.c_out]) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let obase = ((n * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let grow = &grad[obase..obase + g.c_out];
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d = *d + gv;
                }
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.pad_t, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = ConvGeometry::source(ox, kx, g.pad_l, g.w) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * g.c_in;
                        for ci in 0..g.c_in {
                            let xv = x[xbase + ci];
                            let wbase = ((ky * g.kw + kx) * g.c_in + ci) * g.c_out;
                            let mut acc = T::zero();
                            for co in 0..g.c_out {
                                acc = acc + grow[co] * w[wbase + co];
                                dw[wbase + co] = dw[wbase + co] + xv * grow[co];
                            }
                            dx[xbase + ci] = dx[xbase + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Computes the forward value of `op` applied to `inputs`.
pub(crate) fn forward<T: Element>(op: &Op, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Aux<T>)> {
    match op.arity() {
        Some(n) if n != inputs.len() => {
            return Err(Error::domain(op.name(), format!("expected {n} inputs, got {}", inputs.len())));
        }
        None if inputs.is_empty() => return Err(Error::domain(op.name(), "expected at least one input")),
        _ => {}
    }
    let plain = |t: Tensor<T>| Ok((t, Aux::None));
    match op {
        Op::Constant | Op::Param(_) => Err(Error::domain(op.name(), "leaf nodes are not applied")),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            require_rank(op, a, 2)?;
            require_rank(op, b, 2)?;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            plain(Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
        }
        Op::Transpose => {
            let a = inputs[0];
            require_rank(op, a, 2)?;
            let (r, c) = (a.shape()[0], a.shape()[1]);
            plain(Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c)))
        }
        Op::Conv2d { padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geometry(op, *padding, x, w, b)?;
            let out = conv2d_forward(&g, x.data(), w.data(), b.data());
            plain(Tensor::from_parts(vec![g.batch, g.out_h, g.out_w, g.c_out], out))
        }
        Op::MaxPool { size } => {
            let x = inputs[0];
            require_rank(op, x, 4)?;
            let p = *size;
            let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            if p == 0 || h / p == 0 || w / p == 0 {
                return Err(Error::domain(op.name(), format!("pool {p} does not fit input {:?}", x.shape())));
            }
            let (oh, ow) = (h / p, w / p);
            let xd = x.data();
            let mut out = Vec::with_capacity(b * oh * ow * c);
            let mut arg = Vec::with_capacity(b * oh * ow * c);
            for n in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for dy in 0..p {
                                for dx in 0..p {
                                    let idx = ((n * h + oy * p + dy) * w + ox * p + dx) * c + ch;
                                    if best == usize::MAX || xd[idx] > xd[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(xd[best]);
                            arg.push(best);
                        }
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, oh, ow, c], out), Aux::ArgMax(arg)))
        }
        Op::Relu => plain(map(inputs[0], |v| if v > T::zero() { v } else { T::zero() })),
        Op::BatchNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let c = x.last_dim();
            if gamma.shape() != [c] || beta.shape() != [c] {
                return Err(mismatch(op, x.shape(), gamma.shape()));
            }
            let rows = x.len() / c;
            let count = T::lit(rows as f64);
            let xd = x.data();
            let mut mean = vec![T::zero(); c];
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] = mean[ch] + xd[r * c + ch];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            let mut var = vec![T::zero(); c];
            for r in 0..rows {
                for ch in 0..c {
                    let d = xd[r * c + ch] - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
            }
            let eps = T::lit(*eps);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / count + eps).sqrt()).collect();
            let mut x_hat = vec![T::zero(); x.len()];
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                for ch in 0..c {
                    let i = r * c + ch;
                    x_hat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gamma.data()[ch] * x_hat[i] + beta.data()[ch];
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Aux::BatchNorm { x_hat, inv_std }))
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                plain(zip(a, b, |x, y| x + y))
            } else if b.shape() == [a.last_dim()] {
                let c = a.last_dim();
                let bd = b.data();
                let out = a.data().iter().enumerate().map(|(i, &x)| x + bd[i % c]).collect();
                plain(Tensor::from_parts(a.shape().to_vec(), out))
            } else {
                Err(mismatch(op, a.shape(), b.shape()))
            }
        }
        Op::Sub => {
            same_shape(op, inputs[0], inputs[1])?;
            plain(zip(inputs[0], inputs[1], |x, y| x - y))
        }
        Op::Mul => {
            same_shape(op, inputs[0], inputs[1])?;
            plain(zip(inputs[0], inputs[1], |x, y| x * y))
        }
        Op::ScalarMul(s) => {
            let s = T::lit(*s);
            plain(map(inputs[0], |v| v * s))
        }
        Op::AddScalar(s) => {
            let s = T::lit(*s);
            plain(map(inputs[0], |v| v + s))
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let x = inputs[0];
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let s: T = x.data().iter().copied().sum();
                    let s = if mean { s / T::lit(x.len() as f64) } else { s };
                    plain(Tensor::scalar(s))
                }
                Some(a) => {
                    if *a >= x.ndim() {
                        return Err(Error::domain(op.name(), format!("axis {a} out of range for {:?}", x.shape())));
                    }
                    let (outer, mid, inner) = axis_split(x.shape(), *a);
                    let xd = x.data();
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                out[o * inner + i] = out[o * inner + i] + xd[(o * mid + m) * inner + i];
                            }
                        }
                    }
                    if mean {
                        let n = T::lit(mid as f64);
                        out.iter_mut().for_each(|v| *v = *v / n);
                    }
                    plain(Tensor::from_parts(reduced_shape(x.shape(), *axis), out))
                }
            }
        }
        Op::L2Normalize => {
            let x = inputs[0];
            let d = x.last_dim();
            let floor = T::lit(NORM_FLOOR);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                out.extend(row.iter().map(|&v| v / norm));
            }
            plain(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::Cos => plain(map(inputs[0], |v| v.cos())),
        Op::Arccos => {
            let x = inputs[0];
            let tol = T::lit(1.0 + ARCCOS_TOLERANCE);
            if let Some(bad) = x.data().iter().find(|v| v.abs() > tol) {
                return Err(Error::domain(
                    op.name(),
                    format!("input {bad} lies outside [-1, 1]; inputs must be normalized cosines"),
                ));
            }
            let hi = T::lit(1.0 - ARCCOS_CLAMP);
            plain(map(x, |v| v.max(-hi).min(hi).acos()))
        }
        Op::Exp => plain(map(inputs[0], |v| v.exp())),
        Op::Log => {
            if let Some(bad) = inputs[0].data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::domain(op.name(), format!("non-positive input {bad}")));
            }
            plain(map(inputs[0], |v| v.ln()))
        }
        Op::Sqrt => {
            if let Some(bad) = inputs[0].data().iter().find(|v| **v < T::zero()) {
                return Err(Error::domain(op.name(), format!("negative input {bad}")));
            }
            plain(map(inputs[0], |v| v.sqrt()))
        }
        Op::LogSoftmax => {
            let x = inputs[0];
            let d = x.last_dim();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                out.extend(row.iter().map(|&v| v - lse));
            }
            plain(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::Negate => plain(map(inputs[0], |v| -v)),
        Op::Concat { axis } => {
            let first = inputs[0];
            let a = *axis;
            if a >= first.ndim() {
                return Err(Error::domain(op.name(), format!("axis {a} out of range for {:?}", first.shape())));
            }
            let mut shape = first.shape().to_vec();
            shape[a] = 0;
            for t in inputs {
                let compatible = t.ndim() == first.ndim()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == a || x == y);
                if !compatible {
                    return Err(mismatch(op, first.shape(), t.shape()));
                }
                shape[a] += t.shape()[a];
            }
            let (outer, _, inner) = axis_split(first.shape(), a);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[a] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            plain(Tensor::from_parts(shape, out))
        }
        Op::Flatten => {
            let x = inputs[0];
            let b = x.shape()[0];
            plain(Tensor::from_parts(vec![b, x.len() / b], x.data().to_vec()))
        }
        Op::SelectRows(rows) => {
            let x = inputs[0];
            if rows.is_empty() {
                return Err(Error::domain(op.name(), "no rows selected"));
            }
            if let Some(&r) = rows.iter().find(|&&r| r >= x.shape()[0]) {
                return Err(Error::domain(op.name(), format!("row {r} out of range for {:?}", x.shape())));
            }
            let mut shape = x.shape().to_vec();
            shape[0] = rows.len();
            let out = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
            plain(Tensor::from_parts(shape, out))
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            plain(map(inputs[0], |v| v.max(lo).min(hi)))
        }
        Op::PairwiseSqDist => {
            let (x, p) = (inputs[0], inputs[1]);
            require_rank(op, x, 2)?;
            require_rank(op, p, 2)?;
            if x.shape()[1] != p.shape()[1] {
                return Err(mismatch(op, x.shape(), p.shape()));
            }
            let (q, k) = (x.shape()[0], p.shape()[0]);
            let mut out = Vec::with_capacity(q * k);
            for i in 0..q {
                for j in 0..k {
                    out.push(x.row(i).iter().zip(p.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum());
                }
            }
            plain(Tensor::from_parts(vec![q, k], out))
        }
    }
}

/// Vector-Jacobian product: gradients with respect to each input, given the
/// gradient `grad` of the output.
pub(crate) fn backward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    aux: &Aux<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let g = grad.data();
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
    let grads = match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![
                like(a, matmul_raw(g, &bt, m, n, k)),
                like(b, matmul_raw(&at, g, k, m, n)),
            ]
        }
        Op::Transpose => {
            let a = inputs[0];
            vec![like(a, transpose_raw(g, a.shape()[1], a.shape()[0]))]
        }
        Op::Conv2d { padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let geo = conv_geometry(op, *padding, x, w, b)?;
            let (dx, dw, db) = conv2d_backward(&geo, x.data(), w.data(), g);
            vec![like(x, dx), like(w, dw), like(b, db)]
        }
        Op::MaxPool { .. } => {
            let Aux::ArgMax(arg) = aux else { unreachable!("maxpool records argmax") };
            let mut dx = vec![T::zero(); inputs[0].len()];
            for (&src, &gv) in arg.iter().zip(g) {
                dx[src] = dx[src] + gv;
            }
            vec![like(inputs[0], dx)]
        }
        Op::Relu => {
            let x = inputs[0];
            vec![like(x, x.data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect())]
        }
        Op::BatchNorm { .. } => {
            let Aux::BatchNorm { x_hat, inv_std } = aux else { unreachable!("batchnorm records statistics") };
            let (x, gamma) = (inputs[0], inputs[1]);
            let c = x.last_dim();
            let rows = x.len() / c;
            let count = T::lit(rows as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut sum_dxh = vec![T::zero(); c];
            let mut sum_dxh_xh = vec![T::zero(); c];
            for r in 0..rows {
                for ch in 0..c {
                    let i = r * c + ch;
                    dbeta[ch] = dbeta[ch] + g[i];
                    dgamma[ch] = dgamma[ch] + g[i] * x_hat[i];
                    let dxh = g[i] * gamma.data()[ch];
                    sum_dxh[ch] = sum_dxh[ch] + dxh;
                    sum_dxh_xh[ch] = sum_dxh_xh[ch] + dxh * x_hat[i];
                }
            }
            let mut dx = vec![T::zero(); x.len()];
            for r in 0..rows {
                for ch in 0..c {
                    let i = r * c + ch;
                    let dxh = g[i] * gamma.data()[ch];
                    dx[i] = inv_std[ch] / count * (count * dxh - sum_dxh[ch] - x_hat[i] * sum_dxh_xh[ch]);
                }
            }
            vec![like(x, dx), like(gamma, dgamma), like(inputs[2], dbeta)]
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let db = if a.shape() == b.shape() {
                g.to_vec()
            } else {
                let c = b.len();
                let mut db = vec![T::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + gv;
                }
                db
            };
            vec![grad.clone(), like(b, db)]
        }
        Op::Sub => vec![grad.clone(), map(grad, |v| -v)],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![zip(grad, b, |gv, y| gv * y), zip(grad, a, |gv, x| gv * x)]
        }
        Op::ScalarMul(s) => {
            let s = T::lit(*s);
            vec![map(grad, |v| v * s)]
        }
        Op::AddScalar(_) => vec![grad.clone()],
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let x = inputs[0];
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let scale = if mean { T::lit(x.len() as f64) } else { T::one() };
                    vec![like(x, vec![g[0] / scale; x.len()])]
                }
                Some(a) => {
                    let (outer, mid, inner) = axis_split(x.shape(), *a);
                    let scale = if mean { T::lit(mid as f64) } else { T::one() };
                    let mut dx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                dx[(o * mid + m) * inner + i] = g[o * inner + i] / scale;
                            }
                        }
                    }
                    vec![like(x, dx)]
                }
            }
        }
        Op::L2Normalize => {
            let x = inputs[0];
            let d = x.last_dim();
            let floor = T::lit(NORM_FLOOR);
            let mut dx = Vec::with_capacity(x.len());
            for ((row, yrow), grow) in x.data().chunks(d).zip(out.data().chunks(d)).zip(g.chunks(d)) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > floor {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| (gv - y * dot) / norm));
                } else {
                    dx.extend(grow.iter().map(|&gv| gv / floor));
                }
            }
            vec![like(x, dx)]
        }
        Op::Cos => vec![zip(grad, inputs[0], |gv, x| -gv * x.sin())],
        Op::Arccos => {
            let hi = T::lit(1.0 - ARCCOS_CLAMP);
            vec![zip(grad, inputs[0], |gv, x| {
                let c = x.max(-hi).min(hi);
                -gv / (T::one() - c * c).sqrt()
            })]
        }
        Op::Exp => vec![zip(grad, out, |gv, y| gv * y)],
        Op::Log => vec![zip(grad, inputs[0], |gv, x| gv / x)],
        Op::Sqrt => vec![zip(grad, out, |gv, y| gv / (T::lit(2.0) * y))],
        Op::LogSoftmax => {
            let d = out.last_dim();
            let mut dx = Vec::with_capacity(out.len());
            for (yrow, grow) in out.data().chunks(d).zip(g.chunks(d)) {
                let gsum: T = grow.iter().copied().sum();
                dx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| gv - y.exp() * gsum));
            }
            vec![like(out, dx)]
        }
        Op::Negate => vec![map(grad, |v| -v)],
        Op::Concat { axis } => {
            let a = *axis;
            let (outer, _, inner) = axis_split(out.shape(), a);
            let total = out.shape()[a] * inner;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let chunk = t.shape()[a] * inner;
                let mut d = Vec::with_capacity(t.len());
                for o in 0..outer {
                    d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                }
                offset += chunk;
                grads.push(like(t, d));
            }
            grads
        }
        Op::Flatten => vec![like(inputs[0], g.to_vec())],
        Op::SelectRows(rows) => {
            let x = inputs[0];
            let width = x.len() / x.shape()[0];
            let mut dx = vec![T::zero(); x.len()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    dx[r * width + j] = dx[r * width + j] + g[k * width + j];
                }
            }
            vec![like(x, dx)]
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            vec![zip(grad, inputs[0], |gv, x| if x >= lo && x <= hi { gv } else { T::zero() })]
        }
        Op::PairwiseSqDist => {
            let (x, p) = (inputs[0], inputs[1]);
            let (q, k, d) = (x.shape()[0], p.shape()[0], x.shape()[1]);
            let two = T::lit(2.0);
            let mut dx = vec![T::zero(); x.len()];
            let mut dp = vec![T::zero(); p.len()];
            for i in 0..q {
                for j in 0..k {
                    let gv = g[i * k + j] * two;
                    for c in 0..d {
                        let diff = (x.data()[i * d + c] - p.data()[j * d + c]) * gv;
                        dx[i * d + c] = dx[i * d + c] + diff;
                        dp[j * d + c] = dp[j * d + c] - diff;
                    }
                }
            }
            vec![like(x, dx), like(p, dp)]
        }
    };
    Ok(grads)
}
