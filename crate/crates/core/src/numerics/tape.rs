//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every op evaluates eagerly, appends a node holding its value and whatever
//! it needs for the backward pass, and returns a [`Var`] handle. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for the chain rule.

use super::tensor::gemm_into;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    GatherRows,
    Softmax,
    LayerNorm,
    Gelu,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Attention,
    CrossEntropy,
    NormalizeRows,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Attention,
        OpKind::CrossEntropy,
        OpKind::NormalizeRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Attention => "attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::NormalizeRows => "normalize_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    ReduceAxis { input: Var, axis: usize, mean: bool },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    NormalizeRows { input: Var, norms: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::ReduceAxis { mean: false, .. } => OpKind::SumAxis,
            Op::ReduceAxis { mean: true, .. } => OpKind::MeanAxis,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cast(0.044715);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x);
    (y, dy)
}

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
struct View {
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn new(off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { off, rows, cols, rs, cs }
    }

    fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// `C = alpha * A B + beta * C` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked against its buffer above, and `c`
    // is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(buf);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false, fault: None }
    }

    /// Negate the backward rule of one op kind. Only useful to confirm that
    /// a gradient checker notices a broken rule.
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf, if the
    /// leaf tracks gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(kind.name(), a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(kind.name(), value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    /// Broadcast-add a 1-D `[d]` row to every row of `x` (last axis `d`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(row) != [d] {
            return shape_err("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(d.max(1)) {
            add_into(chunk, &r);
        }
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + s);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {:?}", t.shape()));
        }
        let (r, c) = (t.rows(), t.cols());
        let src = t.data();
        let value = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { input: x, axis, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return shape_err("gather_rows", format!("expected 2-D, got {:?}", self.shape(x)));
        }
        let value = self.value(x).gather_rows(indices)?;
        self.push("gather_rows", value, Op::GatherRows { input: x, indices: indices.to_vec() }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let d = value.cols().max(1);
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", format!("x {:?}, gamma {:?}", self.shape(x), self.shape(gamma)));
        }
        let eps = T::cast(LAYER_NORM_EPS);
        let n = T::cast(d as f64);
        let src = self.value(x).data();
        let rows = src.len() / d.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in src.chunks(d.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s = t.data().iter().copied().sum::<T>() / T::cast(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let s = self.shape(x).to_vec();
        if axis >= s.len() || (mean && s[axis] == 0) {
            return shape_err(name, format!("axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        if mean {
            let n = T::cast(len as f64);
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(name, value, Op::ReduceAxis { input: x, axis, mean }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences stacked along the rows. `q: [batch*nq, d]`,
    /// `k, v: [batch*nk, d]`; each head uses a contiguous `d/heads` slice.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let ok = qs.len() == 2
            && ks == vs
            && ks.len() == 2
            && qs[1] == ks[1]
            && batch > 0
            && heads > 0
            && qs[0] % batch == 0
            && ks[0] % batch == 0
            && qs[1] % heads == 0
            && ks[0] > 0;
        if !ok {
            return shape_err("attention", format!("q {qs:?} k {ks:?} v {vs:?} batch {batch} heads {heads}"));
        }
        let d = qs[1];
        let (nq, nk, dh) = (qs[0] / batch, ks[0] / batch, d / heads);
        let scale = T::cast(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * nq * nk];
        let mut out = vec![T::zero(); qs[0] * d];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * nq * nk;
                let qv = View::new(b * nq * d + h * dh, nq, dh, d, 1);
                let kv = View::new(b * nk * d + h * dh, nk, dh, d, 1);
                let pv = View::new(p_off, nq, nk, nk, 1);
                gemm_view(scale, qd, qv, kd, kv.t(), T::zero(), &mut probs, pv);
                for row in probs[p_off..p_off + nq * nk].chunks_mut(nk) {
                    softmax_in_place(row);
                }
                let vv = View::new(b * nk * d + h * dh, nk, dh, d, 1);
                let ov = View::new(b * nq * d + h * dh, nq, dh, d, 1);
                gemm_view(T::one(), &probs, pv, vd, vv, T::zero(), &mut out, ov);
            }
        }
        let value = Tensor::new(vec![qs[0], d], out)?;
        self.push("attention", value, Op::Attention { q, k, v, batch, heads, probs }, &[q, k, v])
    }

    /// Mean negative log-likelihood of integer labels under row-softmax of `logits: [n, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if t.ndim() != 2 || n != labels.len() || n == 0 || labels.iter().any(|&l| l >= c) {
            return shape_err("cross_entropy", format!("logits {:?}, {} labels", t.shape(), labels.len()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(T::min_positive_value()).ln();
        }
        loss /= T::cast(n as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Scale each row (last axis) to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let d = value.cols().max(1);
        let mut norms = Vec::with_capacity(value.numel() / d);
        for row in value.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Invalid("normalize_rows: zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push("normalize_rows", value, Op::NormalizeRows { input: x, norms }, &[x])
    }

    /// Populate gradients of `loss` with respect to every leaf that tracks them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.ndim() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut grads, nodes, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut grads, nodes, *b, |d| d.iter_mut().zip(&g).for_each(|(d, &g)| *d -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&mut grads, nodes, *a, |d| {
                        d.iter_mut().zip(&g).zip(bv).for_each(|((d, &g), &b)| *d += g * b)
                    });
                    accumulate(&mut grads, nodes, *b, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((d, &g), &a)| *d += g * a)
                    });
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, nodes, *x, |d| add_into(d, &g));
                    let n = nodes[row.0].value.numel().max(1);
                    accumulate(&mut grads, nodes, *row, |d| {
                        for chunk in g.chunks(n) {
                            add_into(d, chunk);
                        }
                    });
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, nodes, *x, |d| d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g * *s));
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    accumulate(&mut grads, nodes, *x, |d| add_into(d, &g));
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                    accumulate(&mut grads, nodes, *a, |d| gemm_into(m, n, k, &g, false, bt.data(), true, d, true));
                    accumulate(&mut grads, nodes, *b, |d| gemm_into(k, m, n, at.data(), true, &g, false, d, true));
                }
                Op::Transpose(x) => {
                    let (r, c) = (out_shape[1], out_shape[0]);
                    // out is [c, r]; input is [r, c]
                    accumulate(&mut grads, nodes, *x, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        accumulate(&mut grads, nodes, p, |d| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (outer, full, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                    let len = out_shape[*axis];
                    accumulate(&mut grads, nodes, *input, |d| {
                        for o in 0..outer {
                            let base = o * full * inner + start * inner;
                            add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                }
                Op::GatherRows { input, indices } => {
                    let c = nodes[input.0].value.cols();
                    accumulate(&mut grads, nodes, *input, |d| {
                        for (r, &i) in indices.iter().enumerate() {
                            add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let c = node.value.cols().max(1);
                    accumulate(&mut grads, nodes, *x, |d| {
                        for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot = g.iter().zip(y).map(|(&g, &y)| g * y).sum::<T>();
                            for j in 0..c {
                                d[j] += y[j] * (g[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = nodes[gamma.0].value.data();
                    let c = gv.len().max(1);
                    let n = T::cast(c as f64);
                    accumulate(&mut grads, nodes, *x, |d| {
                        for (r, ((d, g), h)) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for j in 0..c {
                                let dh = g[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * h[j];
                            }
                            mean_dh /= n;
                            mean_dh_h /= n;
                            for j in 0..c {
                                d[j] += rstd[r] * (g[j] * gv[j] - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *gamma, |d| {
                        for (g, h) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                d[j] += g[j] * h[j];
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *beta, |d| {
                        for g in g.chunks(c) {
                            add_into(d, g);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, nodes, *x, |d| {
                        d.iter_mut().zip(&g).zip(xv).for_each(|((d, &g), &x)| *d += g * gelu_parts(x).1)
                    });
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Mean(x) => {
                    let n = T::cast(nodes[x.0].value.numel() as f64);
                    accumulate(&mut grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
                }
                Op::ReduceAxis { input, axis, mean } => {
                    let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                    let w = if *mean { T::one() / T::cast(len as f64) } else { T::one() };
                    accumulate(&mut grads, nodes, *input, |d| {
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    d[base + i] += g[o * inner + i] * w;
                                }
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, batch, heads, probs } => {
                    let (dq, dk, dv) = attention_backward(nodes, &g, *q, *k, *v, *batch, *heads, probs);
                    accumulate(&mut grads, nodes, *q, |d| add_into(d, &dq));
                    accumulate(&mut grads, nodes, *k, |d| add_into(d, &dk));
                    accumulate(&mut grads, nodes, *v, |d| add_into(d, &dv));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = nodes[logits.0].value.cols();
                    let n = T::cast(labels.len() as f64);
                    accumulate(&mut grads, nodes, *logits, |d| {
                        for (r, &l) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == l { T::one() } else { T::zero() };
                                d[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                            }
                        }
                    });
                }
                Op::NormalizeRows { input, norms } => {
                    let y = node.value.data();
                    let c = node.value.cols().max(1);
                    accumulate(&mut grads, nodes, *input, |d| {
                        for (r, ((d, g), y)) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                            let dot = g.iter().zip(y).map(|(&g, &y)| g * y).sum::<T>();
                            for j in 0..c {
                                d[j] += (g[j] - y[j] * dot) / norms[r];
                            }
                        }
                    });
                }
            }
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    probs: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (qt, kt, vt) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let d = qt.cols();
    let (nq, nk, dh) = (qt.rows() / batch, kt.rows() / batch, d / heads);
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); qt.numel()];
    let mut dk = vec![T::zero(); kt.numel()];
    let mut dv = vec![T::zero(); vt.numel()];
    let mut ds = vec![T::zero(); nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * nq * nk;
            let pv = View::new(p_off, nq, nk, nk, 1);
            let qv = View::new(b * nq * d + h * dh, nq, dh, d, 1);
            let kv = View::new(b * nk * d + h * dh, nk, dh, d, 1);
            let local = View::new(0, nq, nk, nk, 1);
            // dP = dO V^T
            gemm_view(T::one(), g, qv, vt.data(), kv.t(), T::zero(), &mut ds, local);
            // dV += P^T dO
            gemm_view(T::one(), probs, pv.t(), g, qv, T::one(), &mut dv, kv);
            let p = &probs[p_off..p_off + nq * nk];
            for (dsr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..nk {
                    dsr[j] = pr[j] * (dsr[j] - dot);
                }
            }
            gemm_view(scale, &ds, local, kt.data(), kv, T::one(), &mut dq, qv);
            gemm_view(scale, &ds, local.t(), qt.data(), qv, T::one(), &mut dk, kv);
        }
    }
    (dq, dk, dv)
}
