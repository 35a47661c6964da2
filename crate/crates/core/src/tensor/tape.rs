//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! it read. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates vector-Jacobian products into the inputs.

use super::kernels::{
    broadcast_shape, broadcast_strides, col2im_add, contiguous_strides, for_each_broadcast, gemm,
    im2col, split_axis, ConvGeom, Footprint, MatView,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One pyramid level inside a flattened `[S, D]` value tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpan {
    pub h: usize,
    pub w: usize,
    /// Row offset of the level's first texel.
    pub start: usize,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Sum { a: Var, axis: Option<usize> },
    MaxAxis { a: Var, arg: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    IndexSelect { a: Var, index: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    TakeLast { a: Var, index: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, col: Vec<f64> },
    Bilinear { map: Var, coords: Var },
    MsDeform {
        value: Var,
        locs: Var,
        weights: Var,
        levels: Vec<LevelSpan>,
        heads: usize,
        points: usize,
    },
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Execution record for one forward pass. Single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    live_bytes: usize,
    peak_bytes: usize,
    kink: Option<f64>,
}

/// Gradients of the leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-element sigmoid focal loss and its derivative with respect to the logit.
pub(crate) fn focal_terms(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    // log p and log(1 - p) in logit space.
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos_w = (1.0 - p).powf(gamma);
    let neg_w = p.powf(gamma);
    let loss = -t * alpha * pos_w * log_p - (1.0 - t) * (1.0 - alpha) * neg_w * log_q;
    let d_pos = alpha * pos_w * (gamma * p * log_p - (1.0 - p));
    let d_neg = (1.0 - alpha) * neg_w * (p - gamma * (1.0 - p) * log_q);
    (loss, t * d_pos + (1.0 - t) * d_neg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records how close non-smooth ops came to their kinks.
    pub fn with_kink_tracking() -> Self {
        Tape {
            kink: Some(f64::INFINITY),
            ..Self::default()
        }
    }

    /// Smallest observed distance to a non-differentiable point, if tracked.
    pub fn kink_margin(&self) -> Option<f64> {
        self.kink
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn note_kink(&mut self, d: f64) {
        if let Some(k) = self.kink.as_mut() {
            if d < *k {
                *k = d;
            }
        }
    }

    fn alloc(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.alloc(value.size_bytes());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- element-wise -------------------------------------------------

    fn unary(&mut self, u: Unary, a: Var) -> Var {
        let x = self.value(a).data();
        let data: Vec<f64> = match u {
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::Scale(s) => x.iter().map(|v| v * s).collect(),
            Unary::AddScalar(s) => x.iter().map(|v| v + s).collect(),
            Unary::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Log => x.iter().map(|v| v.ln()).collect(),
            Unary::Abs => x.iter().map(|v| v.abs()).collect(),
            Unary::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
            Unary::Square => x.iter().map(|v| v * v).collect(),
            Unary::ClampMin(c) => x.iter().map(|v| v.max(c)).collect(),
            Unary::ClampMax(c) => x.iter().map(|v| v.min(c)).collect(),
        };
        if self.kink.is_some() {
            let kink = match u {
                Unary::Relu | Unary::Abs => Some(0.0),
                Unary::ClampMin(c) | Unary::ClampMax(c) => Some(c),
                _ => None,
            };
            if let Some(c) = kink {
                let d = x.iter().map(|v| (v - c).abs()).fold(f64::INFINITY, f64::min);
                self.note_kink(d);
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, data), Op::Unary(u, a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::ClampMin(c), a)
    }
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::ClampMax(c), a)
    }

    fn binary(&mut self, op: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, &[sa, sb]))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Maximum => x.max(y),
            Binary::Minimum => x.min(y),
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data;
        let mut gap = f64::INFINITY;
        if sa == sb {
            data = xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
            if matches!(kind, Binary::Maximum | Binary::Minimum) {
                gap = xa
                    .iter()
                    .zip(xb)
                    .map(|(x, y)| (x - y).abs())
                    .fold(f64::INFINITY, f64::min);
            }
        } else {
            let n: usize = out.iter().product();
            data = vec![0.0; n];
            let (stra, strb) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
            for_each_broadcast(&out, &stra, &strb, |o, ia, ib| {
                data[o] = f(xa[ia], xb[ib]);
                if matches!(kind, Binary::Maximum | Binary::Minimum) {
                    gap = gap.min((xa[ia] - xb[ib]).abs());
                }
            });
        }
        if matches!(kind, Binary::Maximum | Binary::Minimum) {
            self.note_kink(gap);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(out, data), Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Binary::Div, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", Binary::Maximum, a, b)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", Binary::Minimum, a, b)
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product over the last two axes. `b` is either 2-D (shared by
    /// every leading batch of `a`) or has exactly `a`'s batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape(op, &[sa, sb]);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        Ok((batch, m, k, n, shared))
    }

    fn b_view<'a>(data: &'a [f64], k: usize, n: usize, trans_b: bool) -> MatView<'a> {
        if trans_b {
            MatView::new(data, n, k).t()
        } else {
            MatView::new(data, k, n)
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, shared) = self.matmul_dims(a, b, trans_b)?;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if shared {
            gemm(
                MatView::new(xa, batch * m, k),
                Self::b_view(xb, k, n, trans_b),
                &mut out,
                0.0,
            );
        } else {
            for i in 0..batch {
                gemm(
                    MatView::new(&xa[i * m * k..], m, k),
                    Self::b_view(&xb[i * k * n..], k, n, trans_b),
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
        let sa = self.shape(a);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, trans_b },
            ng,
        ))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a, axis: None }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &[&shape]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Sum {
                a,
                axis: Some(axis),
            },
            ng,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", &[self.shape(a)]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_axis", &[&shape]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let mut gap = f64::INFINITY;
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    let v = x[idx];
                    if v > best {
                        second = best;
                        best = v;
                        arg[o * inner + i] = idx;
                    } else if v > second {
                        second = v;
                    }
                }
                out[o * inner + i] = best;
                gap = gap.min(best - second);
            }
        }
        self.note_kink(gap);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::MaxAxis { a, arg },
            ng,
        ))
    }

    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.max_axis(flat, 0)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &[&shape]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a, axis }, ng))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &[&shape]))?;
        let x = self.value(a).data();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in out[r * d..][..d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { a, rstd }, ng))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &[&base, s]));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let x = self.value(p).data();
                out.extend_from_slice(&x[o * len * inner..][..len * inner]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &[self.shape(a), shape]));
        }
        let data = self.value(a).data().to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let in_strides = contiguous_strides(&shape);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; shape.len()];
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for_each_broadcast(&oshape, &pstrides, &zeros, |o, ia, _| out[o] = x[ia]);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if d0 >= nd || d1 >= nd {
            return Err(Error::shape("transpose", &[self.shape(a)]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index.is_empty() || index.iter().any(|&i| i >= shape[0]) {
            return Err(Error::invalid(
                "index_select",
                format!("index out of range for {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&x[i * inner..][..inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = index.len();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::IndexSelect {
                a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..][..len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Narrow { a, axis, start },
            ng,
        ))
    }

    /// Gathers along the last axis: `out[r, j] = a[r, index[r * k + j]]`.
    pub fn take_last(&mut self, a: Var, index: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("take_last", &[&shape]))?;
        let rows = self.value(a).numel() / n;
        if k == 0 || index.len() != rows * k || index.iter().any(|&i| i >= n) {
            return Err(Error::invalid("take_last", format!("bad index for {shape:?}")));
        }
        let x = self.value(a).data();
        let out: Vec<f64> = (0..rows * k).map(|i| x[(i / k) * n + index[i]]).collect();
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = k;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::TakeLast {
                a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Largest `k` entries along the last axis, descending; ties go to the
    /// lower index. Returns the differentiable values and the positions.
    pub fn top_k(&mut self, a: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("top_k", &[&shape]))?;
        if k == 0 || k > n {
            return Err(Error::invalid("top_k", format!("k = {k} with axis length {n}")));
        }
        let x = self.value(a).data();
        let rows = x.len() / n;
        let mut index = Vec::with_capacity(rows * k);
        let mut gap = f64::INFINITY;
        for r in 0..rows {
            let row = &x[r * n..][..n];
            let order = top_k_indices(row, k);
            if k < n {
                let kth = row[order[k - 1]];
                let next = order_next(row, &order);
                gap = gap.min(kth - next);
            }
            index.extend(order);
        }
        self.note_kink(gap);
        let v = self.take_last(a, &index, k)?;
        Ok((v, index))
    }

    // ---- structured kernels -------------------------------------------

    /// 2-D convolution of an `[H, W, Cin]` input with weights laid out as
    /// `[k·k·Cin, Cout]`, producing `[Ho, Wo, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != k * k * sx[2] || stride == 0 {
            return Err(Error::shape("conv2d", &[&sx, &sw]));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", &[&sx, &sw]));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cout = sw[1];
        let col = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; geom.ho * geom.wo * cout];
        gemm(
            MatView::new(&col, geom.ho * geom.wo, geom.patch()),
            MatView::new(self.value(w).data(), geom.patch(), cout),
            &mut out,
            0.0,
        );
        self.alloc(col.len() * 8);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::from_parts(vec![geom.ho, geom.wo, cout], out),
            Op::Conv2d { x, w, geom, col },
            ng,
        ))
    }

    /// Bilinear interpolation of an `[H, W, C]` map at `[P, 2]` (x, y)
    /// coordinates where texel `(i, j)` sits at `(x = j, y = i)`. Texels
    /// outside the map read as zero.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(Error::shape("bilinear_sample", &[&sm, &sc]));
        }
        let (h, w, c) = (sm[0], sm[1], sm[2]);
        let p = sc[0];
        let m = self.value(map).data();
        let xy = self.value(coords).data();
        let mut out = vec![0.0; p * c];
        let mut gap = f64::INFINITY;
        for i in 0..p {
            let fp = Footprint::new(xy[2 * i], xy[2 * i + 1], h, w);
            gap = gap.min(fp.kink_distance());
            let dst = &mut out[i * c..][..c];
            for &(t, cw) in &fp.corners {
                if let Some(t) = t {
                    for (d, v) in dst.iter_mut().zip(&m[t * c..][..c]) {
                        *d += cw * v;
                    }
                }
            }
        }
        self.note_kink(gap);
        let ng = self.ng(map) || self.ng(coords);
        Ok(self.push(
            Tensor::from_parts(vec![p, c], out),
            Op::Bilinear { map, coords },
            ng,
        ))
    }

    /// Multi-scale deformable sampling.
    ///
    /// * `value`: `[S, heads·dh]`, all levels stacked row-wise per `levels`
    /// * `locs`: `[Q, heads, L, K, 2]` level-grid coordinates
    /// * `weights`: `[Q, heads, L, K]` attention weights
    ///
    /// Returns `[Q, heads·dh]`.
    pub fn ms_deform_attn(
        &mut self,
        value: Var,
        locs: Var,
        weights: Var,
        levels: &[LevelSpan],
        heads: usize,
    ) -> Result<Var> {
        let (sv, sl, sw) = (
            self.shape(value).to_vec(),
            self.shape(locs).to_vec(),
            self.shape(weights).to_vec(),
        );
        let bad = || Error::shape("ms_deform_attn", &[&sv, &sl, &sw]);
        if sv.len() != 2 || sl.len() != 5 || sw.len() != 4 || heads == 0 || sv[1] % heads != 0 {
            return Err(bad());
        }
        let (q, l, k) = (sl[0], sl[2], sl[3]);
        if sl[1] != heads || sl[4] != 2 || sw != sl[..4] || l != levels.len() {
            return Err(bad());
        }
        if levels.iter().any(|lv| lv.start + lv.h * lv.w > sv[0]) {
            return Err(bad());
        }
        let d = sv[1];
        let dh = d / heads;
        let v = self.value(value).data();
        let xy = self.value(locs).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; q * d];
        let mut gap = f64::INFINITY;
        for qi in 0..q {
            for m in 0..heads {
                let dst = &mut out[qi * d + m * dh..][..dh];
                for (li, lv) in levels.iter().enumerate() {
                    for ki in 0..k {
                        let s = ((qi * heads + m) * l + li) * k + ki;
                        let a = wt[s];
                        let fp = Footprint::new(xy[2 * s], xy[2 * s + 1], lv.h, lv.w);
                        gap = gap.min(fp.kink_distance());
                        for &(t, cw) in &fp.corners {
                            if let Some(t) = t {
                                let src = &v[(lv.start + t) * d + m * dh..][..dh];
                                let f = a * cw;
                                for (o, x) in dst.iter_mut().zip(src) {
                                    *o += f * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.note_kink(gap);
        let ng = self.ng(value) || self.ng(locs) || self.ng(weights);
        Ok(self.push(
            Tensor::from_parts(vec![q, d], out),
            Op::MsDeform {
                value,
                locs,
                weights,
                levels: levels.to_vec(),
                heads,
                points: k,
            },
            ng,
        ))
    }

    /// Element-wise sigmoid focal loss of `logits` against binary `targets`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(Error::shape(
                "sigmoid_focal",
                &[self.shape(logits), &[targets.len()]],
            ));
        }
        let out: Vec<f64> = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_terms(x, t, alpha, gamma).0)
            .collect();
        let shape = self.shape(logits).to_vec();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            ng,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a one-element `loss`. Only gradients of leaves
    /// that require them are kept in the result.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", &[self.shape(loss)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let bytes = g.len() * 8;
            self.live_bytes += bytes;
            self.peak_bytes = self.peak_bytes.max(self.live_bytes);
            backward_node(&self.nodes, i, &g, &mut grads);
            self.live_bytes -= bytes;
        }
        Ok(Gradients { grads })
    }
}

/// Indices of the `k` largest entries, descending, lower index first on ties.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn order_next(row: &[f64], chosen: &[usize]) -> f64 {
    let mut taken = vec![false; row.len()];
    for &c in chosen {
        taken[c] = true;
    }
    row.iter()
        .enumerate()
        .filter(|(i, _)| !taken[*i])
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Unary(u, a) => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let x = nodes[a.0].value.data();
            let ga = acc(grads, nodes, *a);
            for j in 0..g.len() {
                let d = match *u {
                    Unary::Neg => -1.0,
                    Unary::Scale(s) => s,
                    Unary::AddScalar(_) => 1.0,
                    Unary::Relu => (x[j] > 0.0) as u8 as f64,
                    Unary::Sigmoid => y[j] * (1.0 - y[j]),
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
                    Unary::Sqrt => 0.5 / y[j],
                    Unary::Square => 2.0 * x[j],
                    Unary::ClampMin(c) => (x[j] > c) as u8 as f64,
                    Unary::ClampMax(c) => (x[j] < c) as u8 as f64,
                };
                ga[j] += g[j] * d;
            }
        }
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (xa, xb) = (na.value.data(), nb.value.data());
            let out = node.value.shape();
            let sa = broadcast_strides(na.value.shape(), out);
            let sb = broadcast_strides(nb.value.shape(), out);
            let (da, db): (Vec<f64>, Vec<f64>) = {
                let mut da = vec![0.0; xa.len()];
                let mut db = vec![0.0; xb.len()];
                for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                    let (x1, x2) = (xa[ia], xb[ib]);
                    let (d1, d2) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (x2, x1),
                        Binary::Div => (1.0 / x2, -x1 / (x2 * x2)),
                        Binary::Maximum => {
                            if x1 >= x2 {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Minimum => {
                            if x1 <= x2 {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    da[ia] += g[o] * d1;
                    db[ib] += g[o] * d2;
                });
                (da, db)
            };
            if na.needs_grad {
                add_into(acc(grads, nodes, *a), &da);
            }
            if nb.needs_grad {
                add_into(acc(grads, nodes, *b), &db);
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let sa = na.value.shape();
            let sb = nb.value.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = *node.value.shape().last().unwrap();
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let shared = sb.len() == 2;
            let (xa, xb) = (na.value.data(), nb.value.data());
            if na.needs_grad {
                let ga = acc(grads, nodes, *a);
                if shared {
                    gemm(
                        MatView::new(g, batch * m, n),
                        Tape::b_view(xb, k, n, *trans_b).t(),
                        ga,
                        1.0,
                    );
                } else {
                    for bi in 0..batch {
                        gemm(
                            MatView::new(&g[bi * m * n..], m, n),
                            Tape::b_view(&xb[bi * k * n..], k, n, *trans_b).t(),
                            &mut ga[bi * m * k..],
                            1.0,
                        );
                    }
                }
            }
            if nb.needs_grad {
                let gb = acc(grads, nodes, *b);
                let (rows, nb_batch) = if shared { (batch * m, 1) } else { (m, batch) };
                for bi in 0..nb_batch {
                    let av = MatView::new(&xa[bi * rows * k..], rows, k);
                    let gv = MatView::new(&g[bi * rows * n..], rows, n);
                    let dst = &mut gb[bi * k * n..];
                    if *trans_b {
                        gemm(gv.t(), av, dst, 1.0);
                    } else {
                        gemm(av.t(), gv, dst, 1.0);
                    }
                }
            }
        }
        Op::Sum { a, axis } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let shape = nodes[a.0].value.shape().to_vec();
            let ga = acc(grads, nodes, *a);
            match axis {
                None => ga.iter_mut().for_each(|v| *v += g[0]),
                Some(ax) => {
                    let (outer, len, inner) = split_axis(&shape, *ax);
                    for o in 0..outer {
                        for j in 0..len {
                            add_into(&mut ga[(o * len + j) * inner..][..inner], &g[o * inner..][..inner]);
                        }
                    }
                }
            }
        }
        Op::MaxAxis { a, arg, .. } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let ga = acc(grads, nodes, *a);
            for (j, &src) in arg.iter().enumerate() {
                ga[src] += g[j];
            }
        }
        Op::Softmax { a, axis } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let ga = acc(grads, nodes, *a);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let d = *node.value.shape().last().unwrap();
            let ga = acc(grads, nodes, *a);
            for (r, rs) in rstd.iter().enumerate() {
                let gy = &g[r * d..][..d];
                let yy = &y[r * d..][..d];
                let mg = gy.iter().sum::<f64>() / d as f64;
                let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    ga[r * d + j] += rs * (gy[j] - mg - yy[j] * mgy);
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if nodes[p.0].needs_grad {
                    let gp = acc(grads, nodes, *p);
                    for o in 0..outer {
                        add_into(
                            &mut gp[o * len * inner..][..len * inner],
                            &g[(o * total + offset) * inner..][..len * inner],
                        );
                    }
                }
                offset += len;
            }
        }
        Op::Reshape(a) => {
            if nodes[a.0].needs_grad {
                add_into(acc(grads, nodes, *a), g);
            }
        }
        Op::Permute { a, perm } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let in_strides = contiguous_strides(nodes[a.0].value.shape());
            let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let zeros = vec![0; perm.len()];
            let ga = acc(grads, nodes, *a);
            for_each_broadcast(node.value.shape(), &pstrides, &zeros, |o, ia, _| ga[ia] += g[o]);
        }
        Op::IndexSelect { a, index } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let inner = g.len() / index.len();
            let ga = acc(grads, nodes, *a);
            for (r, &src) in index.iter().enumerate() {
                add_into(&mut ga[src * inner..][..inner], &g[r * inner..][..inner]);
            }
        }
        Op::Narrow { a, axis, start } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            let ga = acc(grads, nodes, *a);
            for o in 0..outer {
                add_into(
                    &mut ga[(o * n + start) * inner..][..len * inner],
                    &g[o * len * inner..][..len * inner],
                );
            }
        }
        Op::TakeLast { a, index } => {
            if !nodes[a.0].needs_grad {
                return;
            }
            let n = *nodes[a.0].value.shape().last().unwrap();
            let k = *node.value.shape().last().unwrap();
            let ga = acc(grads, nodes, *a);
            for (j, &src) in index.iter().enumerate() {
                ga[(j / k) * n + src] += g[j];
            }
        }
        Op::Conv2d { x, w, geom, col } => {
            let cout = *node.value.shape().last().unwrap();
            let rows = geom.ho * geom.wo;
            let gv = MatView::new(g, rows, cout);
            if nodes[w.0].needs_grad {
                let gw = acc(grads, nodes, *w);
                gemm(MatView::new(col, rows, geom.patch()).t(), gv, gw, 1.0);
            }
            if nodes[x.0].needs_grad {
                let mut gcol = vec![0.0; rows * geom.patch()];
                gemm(
                    gv,
                    MatView::new(nodes[w.0].value.data(), geom.patch(), cout).t(),
                    &mut gcol,
                    0.0,
                );
                col2im_add(&gcol, geom, acc(grads, nodes, *x));
            }
        }
        Op::Bilinear { map, coords } => {
            let sm = nodes[map.0].value.shape();
            let (h, w, c) = (sm[0], sm[1], sm[2]);
            let m = nodes[map.0].value.data();
            let xy = nodes[coords.0].value.data();
            let p = xy.len() / 2;
            let mut gmap = nodes[map.0].needs_grad.then(|| vec![0.0; m.len()]);
            let mut gxy = nodes[coords.0].needs_grad.then(|| vec![0.0; xy.len()]);
            for i in 0..p {
                let fp = Footprint::new(xy[2 * i], xy[2 * i + 1], h, w);
                let gi = &g[i * c..][..c];
                let (wx, wy) = fp.coord_weights();
                for (ci, &(t, cw)) in fp.corners.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let texel = &m[t * c..][..c];
                    if let Some(gm) = gmap.as_mut() {
                        for (d, gg) in gm[t * c..][..c].iter_mut().zip(gi) {
                            *d += cw * gg;
                        }
                    }
                    if let Some(gc) = gxy.as_mut() {
                        let dot: f64 = gi.iter().zip(texel).map(|(a, b)| a * b).sum();
                        gc[2 * i] += wx[ci] * dot;
                        gc[2 * i + 1] += wy[ci] * dot;
                    }
                }
            }
            if let Some(gm) = gmap {
                add_into(acc(grads, nodes, *map), &gm);
            }
            if let Some(gc) = gxy {
                add_into(acc(grads, nodes, *coords), &gc);
            }
        }
        Op::MsDeform {
            value,
            locs,
            weights,
            levels,
            heads,
            points,
        } => {
            let (heads, k, l) = (*heads, *points, levels.len());
            let d = nodes[value.0].value.shape()[1];
            let dh = d / heads;
            let v = nodes[value.0].value.data();
            let xy = nodes[locs.0].value.data();
            let wt = nodes[weights.0].value.data();
            let q = wt.len() / (heads * l * k);
            let mut gv = nodes[value.0].needs_grad.then(|| vec![0.0; v.len()]);
            let mut gl = nodes[locs.0].needs_grad.then(|| vec![0.0; xy.len()]);
            let mut gw = nodes[weights.0].needs_grad.then(|| vec![0.0; wt.len()]);
            for qi in 0..q {
                for m in 0..heads {
                    let go = &g[qi * d + m * dh..][..dh];
                    for (li, lv) in levels.iter().enumerate() {
                        for ki in 0..k {
                            let s = ((qi * heads + m) * l + li) * k + ki;
                            let a = wt[s];
                            let fp = Footprint::new(xy[2 * s], xy[2 * s + 1], lv.h, lv.w);
                            let (wx, wy) = fp.coord_weights();
                            let mut dw = 0.0;
                            let (mut dx, mut dy) = (0.0, 0.0);
                            for (ci, &(t, cw)) in fp.corners.iter().enumerate() {
                                let Some(t) = t else { continue };
                                let row = (lv.start + t) * d + m * dh;
                                let dot: f64 = go.iter().zip(&v[row..row + dh]).map(|(x, y)| x * y).sum();
                                dw += cw * dot;
                                dx += wx[ci] * dot;
                                dy += wy[ci] * dot;
                                if let Some(gv) = gv.as_mut() {
                                    let f = a * cw;
                                    for (dst, gg) in gv[row..row + dh].iter_mut().zip(go) {
                                        *dst += f * gg;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[s] += dw;
                            }
                            if let Some(gl) = gl.as_mut() {
                                gl[2 * s] += a * dx;
                                gl[2 * s + 1] += a * dy;
                            }
                        }
                    }
                }
            }
            if let Some(b) = gv {
                add_into(acc(grads, nodes, *value), &b);
            }
            if let Some(b) = gl {
                add_into(acc(grads, nodes, *locs), &b);
            }
            if let Some(b) = gw {
                add_into(acc(grads, nodes, *weights), &b);
            }
        }
        Op::Focal {
            logits,
            targets,
            alpha,
            gamma,
        } => {
            if !nodes[logits.0].needs_grad {
                return;
            }
            let x = nodes[logits.0].value.data();
            let gl = acc(grads, nodes, *logits);
            for j in 0..g.len() {
                gl[j] += g[j] * focal_terms(x[j], targets[j], *alpha, *gamma).1;
            }
        }
    }
}
