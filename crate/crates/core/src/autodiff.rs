//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so node parents
//! always precede the node itself and a single reverse sweep visits each node
//! once. Values are owned by the tape and addressed through [`Var`] handles.
//!
//! Binary elementwise ops broadcast the right operand into the left one:
//! shapes are right-aligned and every right-hand dimension must either equal
//! the left-hand one or be 1. The output always has the left operand's shape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-defined unary op:
/// `(input, output, upstream_grad) -> input_grad`.
pub type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &Tensor<S>, &[S]) -> Vec<S> + Send + Sync>;

/// Sparse linear map `out[o] = Σ w · in[i]` in CSR layout. Used for
/// interpolation and pooling, whose backward pass is the transpose.
#[derive(Clone, Debug)]
pub struct SparseMap<S> {
    in_len: usize,
    out_shape: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<S>,
}

impl<S: Scalar> SparseMap<S> {
    /// Builds the map from one list of `(input_index, weight)` pairs per
    /// output element.
    pub fn from_rows(in_len: usize, out_shape: Vec<usize>, rows: Vec<Vec<(usize, S)>>) -> Result<Self> {
        let out_len: usize = out_shape.iter().product();
        if rows.len() != out_len {
            return Err(Error::InvalidShape(format!(
                "sparse map has {} rows for output shape {:?}",
                rows.len(),
                out_shape
            )));
        }
        let mut indptr = Vec::with_capacity(out_len + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for row in rows {
            for (i, w) in row {
                if i >= in_len {
                    return Err(Error::InvalidShape(format!(
                        "sparse map index {i} out of range {in_len}"
                    )));
                }
                indices.push(i);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        Ok(SparseMap {
            in_len,
            out_shape,
            indptr,
            indices,
            weights,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, input: &[S]) -> Vec<S> {
        debug_assert_eq!(input.len(), self.in_len);
        (0..self.indptr.len() - 1)
            .map(|o| {
                let mut acc = S::zero();
                for p in self.indptr[o]..self.indptr[o + 1] {
                    acc += self.weights[p] * input[self.indices[p]];
                }
                acc
            })
            .collect()
    }

    fn apply_transpose(&self, grad_out: &[S], grad_in: &mut [S]) {
        for o in 0..self.indptr.len() - 1 {
            let g = grad_out[o];
            for p in self.indptr[o]..self.indptr[o + 1] {
                grad_in[self.indices[p]] += self.weights[p] * g;
            }
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: S },
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Clamp { x: Var, lo: S, hi: S },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    RowNormalize { x: Var, eps: S },
    Gather { x: Var, index: Arc<[usize]> },
    Resample { x: Var, map: Arc<SparseMap<S>> },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L1(Var, Var),
    Bce(Var, Var),
    Custom { x: Var, backward: BackwardFn<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Single-threaded record of a forward computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t)
        + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    (y, dy)
}

/// Right-aligned strides of `b` inside `a`'s index space, 0 on broadcast
/// dimensions. `None` when `b` does not broadcast into `a`.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for d in (0..b.len()).rev() {
        let (na, nb) = (a[offset + d], b[d]);
        if nb == na {
            strides[offset + d] = stride;
        } else if nb != 1 {
            return None;
        }
        stride *= nb;
    }
    Some(strides)
}

/// Calls `f(a_index, b_index)` for every element of `a_shape`.
fn for_each_broadcast(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = a_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = a_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ib = 0usize;
    for ia in 0..n {
        f(ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ib += b_strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            ib -= b_strides[d] * a_shape[d];
            idx[d] = 0;
        }
    }
}

fn softmax_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Copies `x` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<S>, op: Op<S>, parents: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.requires_grad(*p));
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::InvalidShape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<S> = if a_shape == b_shape {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let strides = broadcast_strides(&a_shape, b_shape)
                .ok_or_else(|| Error::shape(name, &a_shape, b_shape))?;
            let mut out = vec![S::zero(); av.len()];
            for_each_broadcast(&a_shape, &strides, |ia, ib| out[ia] = f(av[ia], bv[ib]));
            out
        };
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(name, a_shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    /// `mul · x + add`.
    pub fn affine(&mut self, x: Var, mul: S, add: S) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        self.push("affine", shape, out, Op::Affine { x, mul }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| factor * v).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Affine { x, mul: factor }, &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(S::zero()))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary("clamp", x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = softmax_geometry(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).fold(S::neg_infinity(), |m, k| m.max(src[at(k)]));
                let mut total = S::zero();
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both of
    /// the last axis' length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![S::zero(); src.len()];
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..c {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        )
    }

    /// Divides each last-axis row by `sqrt(|row|² + eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let norm = (row.iter().map(|&v| v * v).sum::<S>() + eps).sqrt();
            for j in 0..c {
                dst[j] = row[j] / norm;
            }
        }
        self.push("row_normalize", shape, out, Op::RowNormalize { x, eps }, &[x])
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Covers slicing, patch
    /// extraction, nearest-neighbour upsampling and other reindexing.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if index.len() != n || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::InvalidShape(format!(
                "gather of {} indices into shape {:?} from {} elements",
                index.len(),
                shape,
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        self.push("gather", shape, out, Op::Gather { x, index }, &[x])
    }

    pub fn resample(&mut self, x: Var, map: Arc<SparseMap<S>>) -> Result<Var> {
        if self.value(x).numel() != map.in_len {
            return Err(Error::shape("resample", self.shape(x), &[map.in_len]));
        }
        let out = map.apply(self.value(x).data());
        let shape = map.out_shape.clone();
        self.push("resample", shape, out, Op::Resample { x, map }, &[x])
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).data().to_vec();
        self.push("reshape", shape, out, Op::Reshape(x), &[x])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::InvalidShape(format!("columns {start}..{end} of {c}")));
        }
        let w = end - start;
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (start..end).map(move |j| i * c + j))
            .collect();
        self.gather(x, index.into(), vec![r, w])
    }

    /// Rows selected by `rows`, in order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidShape(format!("row {bad} of {r}")));
        }
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| i * c + j))
            .collect();
        self.gather(x, index.into(), vec![rows.len(), c])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data();
        let total: S = v.iter().copied().sum();
        let n = S::from_usize(v.len()).unwrap_or_else(S::one);
        self.push("mean", vec![1], vec![total / n], Op::Mean(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn count(&self, v: Var) -> S {
        S::from_usize(self.value(v).numel()).unwrap_or_else(S::one)
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: S = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let loss = total / self.count(a);
        self.push("mse", vec![1], vec![loss], Op::Mse(a, b), &[a, b])
    }

    /// Mean absolute error.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: S = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let loss = total / self.count(a);
        self.push("l1", vec![1], vec![loss], Op::L1(a, b), &[a, b])
    }

    /// Mean binary cross-entropy of probabilities `p ∈ (0,1)` against
    /// labels `y ∈ {0,1}`.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        self.same_shape("bce", p, y)?;
        let (pv, yv) = (self.value(p).data(), self.value(y).data());
        if let Some(bad) = pv.iter().find(|&&v| v <= S::zero() || v >= S::one()) {
            return Err(Error::Domain {
                op: "bce",
                detail: format!("probability {bad} outside (0, 1)"),
            });
        }
        if let Some(bad) = yv.iter().find(|&&v| v != S::zero() && v != S::one()) {
            return Err(Error::Domain {
                op: "bce",
                detail: format!("label {bad} not in {{0, 1}}"),
            });
        }
        let total: S = pv
            .iter()
            .zip(yv)
            .map(|(&pp, &yy)| yy * pp.ln() + (S::one() - yy) * (S::one() - pp).ln())
            .sum();
        let loss = -total / self.count(p);
        self.push("bce", vec![1], vec![loss], Op::Bce(p, y), &[p, y])
    }

    /// Records an elementwise-shaped op with caller-supplied forward and
    /// backward rules.
    pub fn custom(&mut self, x: Var, forward: impl Fn(&Tensor<S>) -> Tensor<S>, backward: BackwardFn<S>) -> Result<Var> {
        let out = forward(self.value(x));
        let shape = out.shape().to_vec();
        self.push("custom", shape, out.into_data(), Op::Custom { x, backward }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Populates the gradient of every
    /// leaf that requires one (zero if the leaf does not influence `loss`).
    /// The tape must be [`reset`](Self::reset) before another backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed by a previous backward; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![S::zero(); n]))?;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let node = &nodes[v.0].value;
            if !node.requires_grad() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); node.numel()]);
            f(slot);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = S::zero();
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                dst[j] += a_ip * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(nodes[id].op, Op::Mul(..));
                let is_sub = matches!(nodes[id].op, Op::Sub(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                let a_shape = val(*a).shape();
                let b_shape = val(*b).shape();
                let strides = broadcast_strides(a_shape, b_shape).expect("checked in forward");
                acc(*a, &mut |ga| {
                    if is_mul {
                        for_each_broadcast(a_shape, &strides, |ia, ib| ga[ia] += g[ia] * bv[ib]);
                    } else {
                        for (d, &gi) in ga.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(a_shape, &strides, |ia, ib| {
                        gb[ib] += if is_mul {
                            g[ia] * av[ia]
                        } else if is_sub {
                            -g[ia]
                        } else {
                            g[ia]
                        }
                    });
                });
            }
            Op::Affine { x, mul } => acc(*x, &mut |gx| {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += *mul * gi;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (S::one() - y);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    if xi > S::zero() {
                        *d += gi;
                    }
                }
            }),
            Op::Gelu(x) => acc(*x, &mut |gx| {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    *d += gi * gelu_parts(xi).1;
                }
            }),
            Op::Clamp { x, lo, hi } => acc(*x, &mut |gx| {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    if xi >= *lo && xi <= *hi {
                        *d += gi;
                    }
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = softmax_geometry(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: S = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x).data();
                let gam = val(*gamma).data();
                let c = gam.len();
                let cs = S::from_usize(c).unwrap_or_else(S::one);
                acc(*x, &mut |gx| {
                    for ((row, grow), dst) in xv.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let (mean, rstd) = moments(row, *eps);
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let d = grow[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xhat;
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let d = grow[j] * gam[j];
                            dst[j] += rstd * (d - sum_d / cs - xhat * sum_dx / cs);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (row, grow) in xv.chunks(c).zip(g.chunks(c)) {
                        let (mean, rstd) = moments(row, *eps);
                        for j in 0..c {
                            gg[j] += grow[j] * (row[j] - mean) * rstd;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += grow[j];
                        }
                    }
                });
            }
            Op::RowNormalize { x, eps } => {
                let xv = val(*x).data();
                let c = last_dim(out.shape());
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (((row, yrow), grow), dst) in xv
                        .chunks(c)
                        .zip(y.chunks(c))
                        .zip(g.chunks(c))
                        .zip(gx.chunks_mut(c))
                    {
                        let norm = (row.iter().map(|&v| v * v).sum::<S>() + *eps).sqrt();
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] += (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
            }),
            Op::Resample { x, map } => acc(*x, &mut |gx| map.apply_transpose(g, gx)),
            Op::Concat(parts) => {
                let total = last_dim(out.shape());
                let rows = out.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(val(p).shape());
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.count(*x);
                acc(*x, &mut |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::Mse(a, b) => {
                let n = self.count(*a);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let two = S::lit(2.0);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * two * (av[i] - bv[i]) / n;
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[0] * two * (av[i] - bv[i]) / n;
                    }
                });
            }
            Op::L1(a, b) => {
                let n = self.count(*a);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let sign = |d: S| {
                    if d > S::zero() {
                        S::one()
                    } else if d < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                };
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * sign(av[i] - bv[i]) / n;
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[0] * sign(av[i] - bv[i]) / n;
                    }
                });
            }
            Op::Bce(p, y) => {
                let n = self.count(*p);
                let (pv, yv) = (val(*p).data(), val(*y).data());
                acc(*p, &mut |gp| {
                    for i in 0..gp.len() {
                        let (pp, yy) = (pv[i], yv[i]);
                        gp[i] -= g[0] * (yy / pp - (S::one() - yy) / (S::one() - pp)) / n;
                    }
                });
                acc(*y, &mut |gy| {
                    for i in 0..gy.len() {
                        let pp = pv[i];
                        gy[i] -= g[0] * (pp.ln() - (S::one() - pp).ln()) / n;
                    }
                });
            }
            Op::Custom { x, backward } => {
                let local = backward(val(*x), out, g);
                acc(*x, &mut |gx| {
                    for (d, l) in gx.iter_mut().zip(&local) {
                        *d += *l;
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(row.len()).unwrap_or_else(S::one);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}

/// Plain `[m,k]·[k,n]` product. Accumulates each output in index order of
/// the shared dimension, exactly like the textbook triple loop.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] += a_ip * brow[j];
            }
        }
    }
    out
}
