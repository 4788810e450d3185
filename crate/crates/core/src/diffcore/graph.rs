//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits every node after all of its consumers.

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_index, broadcast_shape, numel, strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Square,
    Sqrt,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Unary(Var, Unary),
    /// Elementwise map with a caller-supplied derivative.
    Custom(Var, fn(f64) -> f64),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Matmul(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    AvgPool3d(Var, [usize; 3]),
    UpsampleTime(Var),
    Softmax(Var),
    /// Saved per-row inverse standard deviations.
    LayerNorm(Var, Vec<S>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of one backward sweep, retained for leaf nodes only.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

struct ConvDims {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }

    fn cols(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn sample_len(&self) -> usize {
        self.ci * self.t * self.h * self.w
    }

    /// In-bounds `(col offset, source offset)` pairs within one spatial
    /// plane, per spatial tap `(b, e)`.
    fn spatial_taps(&self) -> Vec<Vec<(usize, usize)>> {
        let [_, kh, kw] = self.k;
        let [_, sh, sw] = self.stride;
        let [_, ph, pw] = self.pad;
        let [_, ho, wo] = self.out;
        let mut taps = Vec::with_capacity(kh * kw);
        for b in 0..kh {
            for e in 0..kw {
                let mut pairs = Vec::new();
                for oh in 0..ho {
                    let ih = (oh * sh + b) as isize - ph as isize;
                    if ih < 0 || ih >= self.h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * sw + e) as isize - pw as isize;
                        if iw >= 0 && iw < self.w as isize {
                            pairs.push((oh * wo + ow, ih as usize * self.w + iw as usize));
                        }
                    }
                }
                taps.push(pairs);
            }
        }
        taps
    }

    /// Visit `(col plane offset, source plane offset, taps)` for every kernel
    /// row and in-bounds output time step.
    #[inline]
    fn for_each_plane(&self, taps: &[Vec<(usize, usize)>], mut f: impl FnMut(usize, usize, &[(usize, usize)])) {
        let [kt, kh, kw] = self.k;
        let (st, pt) = (self.stride[0], self.pad[0]);
        let [to, ho, wo] = self.out;
        let (l, plane_in, plane_out) = (self.cols(), self.h * self.w, ho * wo);
        for c in 0..self.ci {
            for a in 0..kt {
                for (be, pairs) in taps.iter().enumerate() {
                    let row = (c * kt + a) * kh * kw + be;
                    for ot in 0..to {
                        let it = (ot * st + a) as isize - pt as isize;
                        if it < 0 || it >= self.t as isize {
                            continue;
                        }
                        f(row * l + ot * plane_out, (c * self.t + it as usize) * plane_in, pairs);
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, taps: &[Vec<(usize, usize)>], x: &[S], col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        self.for_each_plane(taps, |dst, src, pairs| {
            for &(d, s) in pairs {
                col[dst + d] = x[src + s];
            }
        });
    }

    fn col2im<S: Scalar>(&self, taps: &[Vec<(usize, usize)>], col: &[S], dx: &mut [S]) {
        self.for_each_plane(taps, |dst, src, pairs| {
            for &(d, s) in pairs {
                dx[src + s] += col[dst + d];
            }
        });
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sum a full-size gradient over broadcast dimensions down to `shape`.
fn reduce_to<S: Scalar>(full: Vec<S>, out_shape: &[usize], shape: &[usize]) -> Tensor<S> {
    if out_shape == shape {
        return Tensor::new(shape.to_vec(), full).expect("shape preserved");
    }
    let idx = broadcast_index(shape, out_shape);
    let mut acc = vec![S::zero(); numel(shape)];
    for (g, &i) in full.iter().zip(&idx) {
        acc[i] += *g;
    }
    Tensor::new(shape.to_vec(), acc).expect("reduced shape")
}

/// Flat source offsets of a permuted view, in output order.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let r = out.len();
    let n = numel(&out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for d in (0..r).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out[d] {
                break;
            }
            off -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::graph(name, format!("shapes {sa:?} and {sb:?} do not broadcast")))?;
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<S> = if sa == out && sb == out {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&sa, &out);
            let ib = broadcast_index(&sb, &out);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out, data)?, Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let t = self.value(a).map(|v| v * c);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let t = self.value(a).map(|v| v + c);
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: S| -> S {
            match kind {
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Sigmoid => {
                    if x >= S::zero() {
                        S::one() / (S::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (S::one() + e)
                    }
                }
                Unary::Tanh => x.tanh(),
                Unary::Relu => x.max(S::zero()),
                Unary::LeakyRelu(s) => {
                    if x > S::zero() {
                        x
                    } else {
                        x * S::of(s)
                    }
                }
                Unary::Abs => x.abs(),
            }
        };
        let t = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(t, Op::Unary(a, kind), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Elementwise `f` whose backward rule is `deriv`, taken on trust.
    pub fn custom(&mut self, a: Var, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Var {
        let t = self.value(a).map(|x| S::of(f(x.as_f64())));
        let needs = self.needs(a);
        self.push(t, Op::Custom(a, deriv), needs)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::graph("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis(a, axis), needs))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::graph("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone();
        let from = t.shape().to_vec();
        let t = t
            .reshaped(shape)
            .map_err(|_| Error::graph("reshape", format!("cannot reshape {from:?} to {shape:?}")))?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::graph("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let idx = permute_index(&shape, perm);
        let src = self.value(a).data();
        let data: Vec<S> = idx.iter().map(|&i| src[i]).collect();
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(out, data)?, Op::Permute(a, perm.to_vec()), needs))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::graph("transpose_last", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::graph(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(out, data)?, Op::Narrow(a, axis, start), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::graph("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::graph("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::graph("concat", format!("{s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out = base;
        out[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(out, data)?, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Stack equal-shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p).to_vec();
            if axis > s.len() {
                return Err(Error::graph("stack", format!("axis {axis} out of range")));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(p, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]`; a rank-2 right
    /// operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::graph("matmul", format!("operands {sa:?} and {sb:?} need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::graph("matmul", format!("incompatible shapes {sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let bo = if shared { 0 } else { i * k * n };
            S::gemm(m, k, n, &da[i * m * k..], false, &db[bo..], false, &mut out[i * m * n..], false);
        }
        let mut oshape = sa[..sa.len() - 2].to_vec();
        oshape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Matmul(a, b), needs))
    }

    /// `x [.., in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let inner = *xs.last().ok_or_else(|| Error::graph("linear", "scalar input"))?;
        let rows = numel(&xs) / inner.max(1);
        let flat = self.reshape(x, &[rows, inner])?;
        let y = self.matmul(flat, w)?;
        let out_dim = self.shape(y)[1];
        let mut oshape = xs;
        *oshape.last_mut().expect("non-empty") = out_dim;
        let y = self.reshape(y, &oshape)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 3-D convolution, `x [B, Ci, T, H, W]`, `w [Co, Ci, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::graph("conv3d", format!("input {xs:?} and kernel {ws:?} mismatch")));
        }
        if stride.contains(&0) {
            return Err(Error::graph("conv3d", "zero stride"));
        }
        let k = [ws[2], ws[3], ws[4]];
        let mut out = [0; 3];
        for d in 0..3 {
            out[d] = conv_out(xs[2 + d], k[d], stride[d], pad[d]).ok_or_else(|| {
                Error::graph("conv3d", format!("kernel {k:?} larger than padded input {xs:?}"))
            })?;
        }
        let dims = ConvDims {
            ci: xs[1],
            t: xs[2],
            h: xs[3],
            w: xs[4],
            k,
            stride,
            pad,
            out,
        };
        let (b, co) = (xs[0], ws[0]);
        let (rows, cols, slen) = (dims.rows(), dims.cols(), dims.sample_len());
        let mut col = vec![S::zero(); rows * cols];
        let mut y = vec![S::zero(); b * co * cols];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let taps = dims.spatial_taps();
        for i in 0..b {
            dims.im2col(&taps, &xd[i * slen..(i + 1) * slen], &mut col);
            S::gemm(co, rows, cols, wd, false, &col, false, &mut y[i * co * cols..], false);
        }
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor::new(vec![b, co, out[0], out[1], out[2]], y)?;
        Ok(self.push(t, Op::Conv3d { x, w, stride, pad }, needs))
    }

    /// 1-D convolution along the last axis: `x [B, Ci, T]`, `w [Co, Ci, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::graph("conv1d", format!("input {xs:?} and kernel {ws:?} must be rank 3")));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], xs[2], 1, 1])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], ws[2], 1, 1])?;
        let y = self.conv3d(x5, w5, [stride, 1, 1], [pad, 0, 0])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &ys[..3])
    }

    /// Non-overlapping average pooling over `(T, H, W)`; extents must divide.
    pub fn avg_pool3d(&mut self, x: Var, k: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || (0..3).any(|d| k[d] == 0 || xs[2 + d] % k[d] != 0) {
            return Err(Error::graph("avg_pool3d", format!("window {k:?} does not tile {xs:?}")));
        }
        let (bc, t, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
        let (to, ho, wo) = (t / k[0], h / k[1], w / k[2]);
        let inv = S::of(1.0 / (k[0] * k[1] * k[2]) as f64);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); bc * to * ho * wo];
        for c in 0..bc {
            for ti in 0..t {
                for hi in 0..h {
                    let srow = ((c * t + ti) * h + hi) * w;
                    let orow = ((c * to + ti / k[0]) * ho + hi / k[1]) * wo;
                    for wi in 0..w {
                        out[orow + wi / k[2]] += src[srow + wi];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(x);
        let t = Tensor::new(vec![xs[0], xs[1], to, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool3d(x, k), needs))
    }

    /// Nearest-neighbour resampling of axis 2 of `[B, C, T, H, W]` to
    /// `t_out` steps; output step `t` reads input step `t * T / t_out`.
    pub fn upsample_time(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || t_out == 0 || xs[2] == 0 {
            return Err(Error::graph("upsample_time", format!("cannot resample {xs:?} to {t_out} steps")));
        }
        let (bc, t, hw) = (xs[0] * xs[1], xs[2], xs[3] * xs[4]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(bc * t_out * hw);
        for c in 0..bc {
            for to in 0..t_out {
                let ti = to * t / t_out;
                let base = (c * t + ti) * hw;
                out.extend_from_slice(&src[base..base + hw]);
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(vec![xs[0], xs[1], t_out, xs[3], xs[4]], out)?;
        Ok(self.push(t, Op::UpsampleTime(x), needs))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Error::graph("softmax", "scalar input"))?;
        let src = self.value(x).data();
        if !src.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("softmax logits of shape {xs:?} are not finite")));
        }
        let mut out = src.to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax(x), needs))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Error::graph("layer_norm", "scalar input"))?;
        if n == 0 {
            return Err(Error::graph("layer_norm", "empty last axis"));
        }
        let eps = S::of(eps);
        let nn = S::of(n as f64);
        let mut out = self.value(x).data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / n);
        for row in out.chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::LayerNorm(x, inv), needs))
    }

    /// Normalize each sample over all non-batch axes, then apply per-channel
    /// (axis 1) `gamma` and `beta`.
    pub fn sample_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::graph("sample_norm", format!("input {xs:?} needs batch and channel axes")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::graph("sample_norm", format!("affine parameters must have shape [{c}]")));
        }
        let flat = self.reshape(x, &[xs[0], numel(&xs[1..])])?;
        let normed = self.layer_norm(flat, eps)?;
        let y = self.reshape(normed, &xs)?;
        let mut cshape = vec![1; xs.len()];
        cshape[1] = c;
        let g = self.reshape(gamma, &cshape)?;
        let b = self.reshape(beta, &cshape)?;
        let y = self.mul(y, g)?;
        self.add(y, b)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::graph("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Add gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn backprop(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let out = g.shape();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ia = (sa != out).then(|| broadcast_index(sa, out));
                let ib = (sb != out).then(|| broadcast_index(sb, out));
                let at = |i: usize| match &ia {
                    Some(m) => va[m[i]],
                    None => va[i],
                };
                let bt = |i: usize| match &ib {
                    Some(m) => vb[m[i]],
                    None => vb[i],
                };
                if self.needs(*a) {
                    let full: Vec<S> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * bt(i)).collect(),
                        Binary::Div => (0..gd.len()).map(|i| gd[i] / bt(i)).collect(),
                    };
                    accumulate(grads, *a, reduce_to(full, out, sa));
                }
                if self.needs(*b) {
                    let full: Vec<S> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&v| -v).collect(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * at(i)).collect(),
                        Binary::Div => (0..gd.len())
                            .map(|i| {
                                let y = bt(i);
                                -gd[i] * at(i) / (y * y)
                            })
                            .collect(),
                    };
                    accumulate(grads, *b, reduce_to(full, out, sb));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * *c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<S> = (0..gd.len())
                    .map(|i| {
                        let (xi, yi) = (x[i], y[i]);
                        let local = match kind {
                            Unary::Square => S::of(2.0) * xi,
                            Unary::Sqrt => S::of(0.5) / yi,
                            Unary::Exp => yi,
                            Unary::Ln => S::one() / xi,
                            Unary::Sigmoid => yi * (S::one() - yi),
                            Unary::Tanh => S::one() - yi * yi,
                            Unary::Relu => {
                                if xi > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xi > S::zero() {
                                    S::one()
                                } else {
                                    S::of(*s)
                                }
                            }
                            Unary::Abs => {
                                if xi > S::zero() {
                                    S::one()
                                } else if xi < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                }
                            }
                        };
                        gd[i] * local
                    })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Custom(a, deriv) => {
                let x = self.value(*a).data();
                let d: Vec<S> = (0..gd.len()).map(|i| gd[i] * S::of(deriv(x[i].as_f64()))).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, gd[0]));
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let mut d = Vec::with_capacity(numel(&s));
                for o in 0..outer {
                    for _ in 0..n {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *a, Tensor::new(s, d)?);
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                accumulate(grads, *a, g.clone().reshaped(&s)?);
            }
            Op::Permute(a, perm) => {
                let s = self.shape(*a).to_vec();
                let idx = permute_index(&s, perm);
                let mut d = vec![S::zero(); gd.len()];
                for (j, &i) in idx.iter().enumerate() {
                    d[i] = gd[j];
                }
                accumulate(grads, *a, Tensor::new(s, d)?);
            }
            Op::Narrow(a, axis, start) => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![S::zero(); numel(&s)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, Tensor::new(s, d)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    let n = s[*axis];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(numel(&s));
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[src..src + n * inner]);
                        }
                        accumulate(grads, p, Tensor::new(s, d)?);
                    }
                    offset += n;
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![S::zero(); va.len()];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * k * n };
                        S::gemm(m, n, k, &gd[i * m * n..], false, &vb[bo..], true, &mut da[i * m * k..], false);
                    }
                    accumulate(grads, *a, Tensor::new(sa.clone(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); vb.len()];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * k * n };
                        S::gemm(k, m, n, &va[i * m * k..], true, &gd[i * m * n..], false, &mut db[bo..], shared);
                    }
                    accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::Conv3d { x, w, stride, pad } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let os = g.shape();
                let dims = ConvDims {
                    ci: xs[1],
                    t: xs[2],
                    h: xs[3],
                    w: xs[4],
                    k: [ws[2], ws[3], ws[4]],
                    stride: *stride,
                    pad: *pad,
                    out: [os[2], os[3], os[4]],
                };
                let (b, co) = (xs[0], ws[0]);
                let (rows, cols, slen) = (dims.rows(), dims.cols(), dims.sample_len());
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut col = vec![S::zero(); rows * cols];
                let mut dw = self.needs(*w).then(|| vec![S::zero(); wd.len()]);
                let mut dx = self.needs(*x).then(|| vec![S::zero(); xd.len()]);
                let taps = dims.spatial_taps();
                for i in 0..b {
                    let gb = &gd[i * co * cols..(i + 1) * co * cols];
                    if let Some(dw) = dw.as_mut() {
                        dims.im2col(&taps, &xd[i * slen..(i + 1) * slen], &mut col);
                        S::gemm(co, cols, rows, gb, false, &col, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        S::gemm(rows, co, cols, wd, true, gb, false, &mut col, false);
                        dims.col2im(&taps, &col, &mut dx[i * slen..(i + 1) * slen]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::new(ws, dw)?);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
            }
            Op::AvgPool3d(x, k) => {
                let xs = self.shape(*x).to_vec();
                let (bc, t, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
                let (to, ho, wo) = (t / k[0], h / k[1], w / k[2]);
                let inv = S::of(1.0 / (k[0] * k[1] * k[2]) as f64);
                let mut d = vec![S::zero(); numel(&xs)];
                for c in 0..bc {
                    for ti in 0..t {
                        for hi in 0..h {
                            let srow = ((c * t + ti) * h + hi) * w;
                            let orow = ((c * to + ti / k[0]) * ho + hi / k[1]) * wo;
                            for wi in 0..w {
                                d[srow + wi] = gd[orow + wi / k[2]] * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs, d)?);
            }
            Op::UpsampleTime(x) => {
                let xs = self.shape(*x).to_vec();
                let (bc, t, hw) = (xs[0] * xs[1], xs[2], xs[3] * xs[4]);
                let t_out = g.shape()[2];
                let mut d = vec![S::zero(); numel(&xs)];
                for c in 0..bc {
                    for to in 0..t_out {
                        let ti = to * t / t_out;
                        let (src, dst) = ((c * t_out + to) * hw, (c * t + ti) * hw);
                        for j in 0..hw {
                            d[dst + j] += gd[src + j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs, d)?);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *g.shape().last().expect("rank >= 1");
                let mut d = vec![S::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gd.chunks_exact(n)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm(x, inv) => {
                let y = node.value.data();
                let n = *g.shape().last().expect("rank >= 1");
                let nn = S::of(n as f64);
                let mut d = vec![S::zero(); y.len()];
                for (r, ((dr, yr), gr)) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gd.chunks_exact(n)).enumerate() {
                    let sg: S = gr.iter().copied().sum();
                    let sgy: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = inv[r] / nn * (nn * gr[j] - sg - yr[j] * sgy);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
