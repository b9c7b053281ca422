//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and enough
//! metadata to replay the adjoint. `backward` walks the tape once in reverse
//! and accumulates gradients for every node, leaves included. The primitive
//! set is exactly what the harmonization model needs; there is no general
//! broadcasting.

use crate::conv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffle;
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, T),
    /// Tensor scaled by a single-element node.
    ScaleByNode(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Clamp(NodeId, T, T),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Concat(Vec<NodeId>),
    Narrow {
        x: NodeId,
        start: usize,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    ChannelMean(NodeId),
    ChannelStd(NodeId),
    BcastAdd(NodeId, NodeId),
    BcastSub(NodeId, NodeId),
    BcastMul(NodeId, NodeId),
    BcastDiv(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Gram(NodeId),
    NormalizeColumns {
        x: NodeId,
        eps: T,
    },
    ExtractPatch {
        x: NodeId,
        y0: usize,
        x0: usize,
        ph: usize,
        pw: usize,
    },
    Squeeze {
        x: NodeId,
        r: usize,
    },
    Unsqueeze {
        x: NodeId,
        r: usize,
    },
    Reshape(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Identity of this tape; caches remember it so a reverse pass cannot be
    /// fed components recorded on a different tape.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        self.value(id).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: T) -> NodeId {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_value(s)?;
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::ScaleByNode(x, s)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| x.min(hi).max(lo));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let v = conv::conv2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Fully connected layer: `w [Out,In] * x [In] + b [Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (out_dim, in_dim) = self.value(w).dims2()?;
        if xv.shape() != [in_dim] {
            return Err(Error::Shape(format!(
                "linear expects input [{in_dim}], got {:?}",
                xv.shape()
            )));
        }
        if self.value(b).shape() != [out_dim] {
            return Err(Error::Shape(format!(
                "linear bias must be [{out_dim}], got {:?}",
                self.value(b).shape()
            )));
        }
        let wd = self.value(w).data();
        let xd = xv.data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(out_dim);
        for o in 0..out_dim {
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = bd[o];
            for (&wv, &x_) in row.iter().zip(xd) {
                acc = wv.mul_add(x_, acc);
            }
            out.push(acc);
        }
        let v = Tensor::from_vec(vec![out_dim], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Concatenation along axis 0 (channels for maps, elements for vectors).
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis0 = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != first.len() || v.shape()[1..] != first[1..] {
                return Err(Error::Shape(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    v.shape(),
                    first
                )));
            }
            axis0 += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = axis0;
        let v = Tensor::from_vec(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c0 = xv.shape()[0];
        if start + len > c0 {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of axis-0 extent {c0}",
                start + len
            )));
        }
        let rest: usize = xv.shape()[1..].iter().product();
        let data = xv.data()[start * rest..(start + len) * rest].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let v = Tensor::from_vec(shape, data)?;
        Ok(self.push(v, Op::Narrow { x, start }))
    }

    /// Rows of axis 0 selected by index (duplicates allowed).
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let c0 = xv.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c0) {
            return Err(Error::Shape(format!("gather index {bad} out of extent {c0}")));
        }
        let rest: usize = xv.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * rest);
        for &i in idx {
            data.extend_from_slice(&xv.data()[i * rest..(i + 1) * rest]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::from_vec(shape, data)?;
        Ok(self.push(v, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Per-channel spatial mean of `[C,H,W]` (equals global average pooling).
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (mu, _) = self.value(x).channel_stats()?;
        Ok(self.push(mu, Op::ChannelMean(x)))
    }

    /// Per-channel population standard deviation, stabilized as
    /// `sqrt(var + eps)`. Pass `eps = 0` for the exact statistic.
    pub fn channel_std(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        let area = h * w;
        let inv = T::one() / T::of_usize(area);
        let mut sig = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &xv.data()[ch * area..(ch + 1) * area];
            let m = plane.iter().fold(T::zero(), |a, &v| a + v) * inv;
            let var = plane.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) * inv;
            sig.push((var + eps).sqrt());
        }
        let v = Tensor::from_vec(vec![c], sig)?;
        Ok(self.push(v, Op::ChannelStd(x)))
    }

    fn bcast_check(&self, x: NodeId, v: NodeId) -> Result<(usize, usize)> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(v).shape() != [c] {
            return Err(Error::Shape(format!(
                "per-channel vector must be [{c}], got {:?}",
                self.value(v).shape()
            )));
        }
        Ok((c, h * w))
    }

    fn bcast_apply(&self, x: NodeId, v: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (c, area) = self.bcast_check(x, v)?;
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(xd.len());
        for ch in 0..c {
            let s = vd[ch];
            for &e in &xd[ch * area..(ch + 1) * area] {
                out.push(f(e, s));
            }
        }
        Tensor::from_vec(self.value(x).shape().to_vec(), out)
    }

    /// `x[c,h,w] + v[c]`
    pub fn bcast_add(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.bcast_apply(x, v, |a, b| a + b)?;
        Ok(self.push(out, Op::BcastAdd(x, v)))
    }

    /// `x[c,h,w] - v[c]`
    pub fn bcast_sub(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.bcast_apply(x, v, |a, b| a - b)?;
        Ok(self.push(out, Op::BcastSub(x, v)))
    }

    /// `x[c,h,w] * v[c]`
    pub fn bcast_mul(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.bcast_apply(x, v, |a, b| a * b)?;
        Ok(self.push(out, Op::BcastMul(x, v)))
    }

    /// `x[c,h,w] / v[c]`; the caller is responsible for keeping `v` away
    /// from zero (the model always adds a stabilizer first).
    pub fn bcast_div(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.bcast_apply(x, v, |a, b| a / b)?;
        Ok(self.push(out, Op::BcastDiv(x, v)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Column Gram matrix of `f [C,N]`: `G = f^T f` with shape `[N,N]`.
    pub fn gram(&mut self, f: NodeId) -> Result<NodeId> {
        let fv = self.value(f);
        let (c, n) = fv.dims2()?;
        let fd = fv.data();
        let mut g = vec![T::zero(); n * n];
        for ch in 0..c {
            let row = &fd[ch * n..(ch + 1) * n];
            for p in 0..n {
                let fp = row[p];
                let grow = &mut g[p * n..(p + 1) * n];
                for (ge, &fq) in grow.iter_mut().zip(row) {
                    *ge = fp.mul_add(fq, *ge);
                }
            }
        }
        let v = Tensor::from_vec(vec![n, n], g)?;
        Ok(self.push(v, Op::Gram(f)))
    }

    /// Scales every column of `f [C,N]` to unit L2 norm, stabilized as
    /// `v / sqrt(|v|^2 + eps)`.
    pub fn normalize_columns(&mut self, f: NodeId, eps: T) -> Result<NodeId> {
        let fv = self.value(f);
        let (c, n) = fv.dims2()?;
        let fd = fv.data();
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            let mut s = T::zero();
            for ch in 0..c {
                let v = fd[ch * n + p];
                s = v.mul_add(v, s);
            }
            let r = T::one() / (s + eps).sqrt();
            for ch in 0..c {
                out[ch * n + p] = fd[ch * n + p] * r;
            }
        }
        let v = Tensor::from_vec(vec![c, n], out)?;
        Ok(self.push(v, Op::NormalizeColumns { x: f, eps }))
    }

    /// Extracts a `ph x pw` spatial patch starting at `(y0, x0)` from a
    /// `[C,H,W]` map, flattened to `[C, ph*pw]` position columns.
    pub fn extract_patch(
        &mut self,
        x: NodeId,
        y0: usize,
        x0: usize,
        ph: usize,
        pw: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if y0 + ph > h || x0 + pw > w {
            return Err(Error::Shape(format!(
                "patch {ph}x{pw} at ({y0},{x0}) exceeds map {h}x{w}"
            )));
        }
        let xd = self.value(x).data();
        let np = ph * pw;
        let mut out = vec![T::zero(); c * np];
        for ch in 0..c {
            for dy in 0..ph {
                let src = (ch * h + y0 + dy) * w + x0;
                let dst = ch * np + dy * pw;
                out[dst..dst + pw].copy_from_slice(&xd[src..src + pw]);
            }
        }
        let v = Tensor::from_vec(vec![c, np], out)?;
        Ok(self.push(v, Op::ExtractPatch { x, y0, x0, ph, pw }))
    }

    pub fn squeeze(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = shuffle::squeeze(self.value(x), r)?;
        Ok(self.push(v, Op::Squeeze { x, r }))
    }

    pub fn unsqueeze(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = shuffle::unsqueeze(self.value(x), r)?;
        Ok(self.push(v, Op::Unsqueeze { x, r }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns gradients for
    /// every node that influences the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(lv.shape().to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.adjoint(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> &'g mut Tensor<T> {
        let shape = self.value(id).shape();
        grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(grads, *a), g);
                let gb = self.slot(grads, *b);
                for (d, &s) in gb.data_mut().iter_mut().zip(gd) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                {
                    let bv = self.value(b).data();
                    let ga = self.slot(grads, a);
                    for ((d, &s), &bv) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d = s.mul_add(bv, *d);
                    }
                }
                let av = self.value(a).data();
                let gb = self.slot(grads, b);
                for ((d, &s), &av) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                    *d = s.mul_add(av, *d);
                }
            }
            Op::AddScalar(a) => add_into(self.slot(grads, *a), g),
            Op::MulScalar(a, c) => {
                let c = *c;
                let ga = self.slot(grads, *a);
                for (d, &s) in ga.data_mut().iter_mut().zip(gd) {
                    *d = s.mul_add(c, *d);
                }
            }
            Op::ScaleByNode(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.value(s).data()[0];
                {
                    let gx = self.slot(grads, x);
                    for (d, &gi) in gx.data_mut().iter_mut().zip(gd) {
                        *d = gi.mul_add(sv, *d);
                    }
                }
                let xv = self.value(x).data();
                let mut acc = T::zero();
                for (&gi, &xi) in gd.iter().zip(xv) {
                    acc = gi.mul_add(xi, acc);
                }
                let gs = self.slot(grads, s);
                gs.data_mut()[0] += acc;
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &x) in ga.data_mut().iter_mut().zip(gd).zip(xv) {
                    if x > T::zero() {
                        *d += s;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let xv = self.value(*a).data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &x) in ga.data_mut().iter_mut().zip(gd).zip(xv) {
                    *d += if x > T::zero() { s } else { s * slope };
                }
            }
            Op::Tanh(a) => {
                let yv = self.nodes[idx].value.data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &y) in ga.data_mut().iter_mut().zip(gd).zip(yv) {
                    *d += s * (T::one() - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[idx].value.data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &y) in ga.data_mut().iter_mut().zip(gd).zip(yv) {
                    *d += s * y * (T::one() - y);
                }
            }
            Op::Sqrt(a) => {
                let yv = self.nodes[idx].value.data();
                let two = T::one() + T::one();
                let ga = self.slot(grads, *a);
                for ((d, &s), &y) in ga.data_mut().iter_mut().zip(gd).zip(yv) {
                    if y > T::zero() {
                        *d += s / (two * y);
                    }
                }
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &x) in ga.data_mut().iter_mut().zip(gd).zip(xv) {
                    if x > T::zero() {
                        *d += s;
                    } else if x < T::zero() {
                        *d -= s;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = self.value(*a).data();
                let ga = self.slot(grads, *a);
                for ((d, &s), &x) in ga.data_mut().iter_mut().zip(gd).zip(xv) {
                    if x >= lo && x <= hi {
                        *d += s;
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), *stride, *padding, g)?;
                add_into(self.slot(grads, *x), &dx);
                add_into(self.slot(grads, *w), &dw);
                add_into(self.slot(grads, *b), &db);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (out_dim, in_dim) = self.value(w).dims2()?;
                {
                    let wd = self.value(w).data();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for o in 0..out_dim {
                        let go = gd[o];
                        let row = &wd[o * in_dim..(o + 1) * in_dim];
                        for (d, &wv) in gxd.iter_mut().zip(row) {
                            *d = go.mul_add(wv, *d);
                        }
                    }
                }
                {
                    let xd = self.value(x).data();
                    let gw = self.slot(grads, w);
                    let gwd = gw.data_mut();
                    for o in 0..out_dim {
                        let go = gd[o];
                        let row = &mut gwd[o * in_dim..(o + 1) * in_dim];
                        for (d, &xv) in row.iter_mut().zip(xd) {
                            *d = go.mul_add(xv, *d);
                        }
                    }
                }
                add_into(self.slot(grads, b), g);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let len = self.value(p).len();
                    let gp = self.slot(grads, p);
                    for (d, &s) in gp.data_mut().iter_mut().zip(&gd[offset..offset + len]) {
                        *d += s;
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                let rest: usize = self.value(*x).shape()[1..].iter().product();
                let offset = start * rest;
                let gx = self.slot(grads, *x);
                for (d, &s) in gx.data_mut()[offset..offset + gd.len()].iter_mut().zip(gd) {
                    *d += s;
                }
            }
            Op::Gather { x, idx: indices } => {
                let indices = indices.clone();
                let rest: usize = self.value(*x).shape()[1..].iter().product();
                let gx = self.slot(grads, *x);
                let gxd = gx.data_mut();
                for (j, &i) in indices.iter().enumerate() {
                    let src = &gd[j * rest..(j + 1) * rest];
                    for (d, &s) in gxd[i * rest..(i + 1) * rest].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let area = h * w;
                let inv = T::one() / T::of_usize(area);
                let gx = self.slot(grads, *x);
                let gxd = gx.data_mut();
                for ch in 0..c {
                    let contrib = gd[ch] * inv;
                    for d in &mut gxd[ch * area..(ch + 1) * area] {
                        *d += contrib;
                    }
                }
            }
            Op::ChannelStd(x) => {
                // d sigma_c / d x_i = (x_i - mu_c) / (area * sigma_c)
                let x = *x;
                let (c, h, w) = self.value(x).dims3()?;
                let area = h * w;
                let inv = T::one() / T::of_usize(area);
                let sig = self.nodes[idx].value.data();
                let xv = self.value(x).data();
                let gx = self.slot(grads, x);
                let gxd = gx.data_mut();
                for ch in 0..c {
                    if sig[ch] <= T::zero() {
                        continue; // constant channel: subgradient zero
                    }
                    let plane = &xv[ch * area..(ch + 1) * area];
                    let mu = plane.iter().fold(T::zero(), |a, &v| a + v) * inv;
                    let scale = gd[ch] * inv / sig[ch];
                    for (d, &v) in gxd[ch * area..(ch + 1) * area].iter_mut().zip(plane) {
                        *d = scale.mul_add(v - mu, *d);
                    }
                }
            }
            Op::BcastAdd(x, v) | Op::BcastSub(x, v) => {
                let negate = matches!(self.nodes[idx].op, Op::BcastSub(_, _));
                let (x, v) = (*x, *v);
                add_into(self.slot(grads, x), g);
                let area: usize = self.value(x).shape()[1..].iter().product();
                let c = self.value(v).len();
                let gv = self.slot(grads, v);
                let gvd = gv.data_mut();
                for ch in 0..c {
                    let s = gd[ch * area..(ch + 1) * area]
                        .iter()
                        .fold(T::zero(), |a, &e| a + e);
                    if negate {
                        gvd[ch] -= s;
                    } else {
                        gvd[ch] += s;
                    }
                }
            }
            Op::BcastMul(x, v) => {
                let (x, v) = (*x, *v);
                let area: usize = self.value(x).shape()[1..].iter().product();
                let c = self.value(v).len();
                {
                    let vv = self.value(v).data().to_vec();
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for ch in 0..c {
                        let s = vv[ch];
                        for (d, &gi) in gxd[ch * area..(ch + 1) * area].iter_mut().zip(&gd[ch * area..(ch + 1) * area]) {
                            *d = gi.mul_add(s, *d);
                        }
                    }
                }
                let xv = self.value(x).data();
                let gv = self.slot(grads, v);
                let gvd = gv.data_mut();
                for ch in 0..c {
                    let mut acc = T::zero();
                    for (&gi, &xi) in gd[ch * area..(ch + 1) * area]
                        .iter()
                        .zip(&xv[ch * area..(ch + 1) * area])
                    {
                        acc = gi.mul_add(xi, acc);
                    }
                    gvd[ch] += acc;
                }
            }
            Op::BcastDiv(x, v) => {
                let (x, v) = (*x, *v);
                let area: usize = self.value(x).shape()[1..].iter().product();
                let c = self.value(v).len();
                let vv = self.value(v).data().to_vec();
                {
                    let gx = self.slot(grads, x);
                    let gxd = gx.data_mut();
                    for ch in 0..c {
                        let inv = T::one() / vv[ch];
                        for (d, &gi) in gxd[ch * area..(ch + 1) * area].iter_mut().zip(&gd[ch * area..(ch + 1) * area]) {
                            *d = gi.mul_add(inv, *d);
                        }
                    }
                }
                let yv = self.nodes[idx].value.data();
                let gv = self.slot(grads, v);
                let gvd = gv.data_mut();
                for ch in 0..c {
                    let mut acc = T::zero();
                    for (&gi, &yi) in gd[ch * area..(ch + 1) * area]
                        .iter()
                        .zip(&yv[ch * area..(ch + 1) * area])
                    {
                        acc = gi.mul_add(yi, acc);
                    }
                    gvd[ch] -= acc / vv[ch];
                }
            }
            Op::SumAll(x) => {
                let s = gd[0];
                let gx = self.slot(grads, *x);
                for d in gx.data_mut() {
                    *d += s;
                }
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let s = gd[0] / T::of_usize(n);
                let gx = self.slot(grads, *x);
                for d in gx.data_mut() {
                    *d += s;
                }
            }
            Op::Gram(f) => {
                // G = f^T f  =>  f_bar = f (G_bar + G_bar^T)
                let f = *f;
                let (c, n) = self.value(f).dims2()?;
                let fd = self.value(f).data();
                let gf = self.slot(grads, f);
                let gfd = gf.data_mut();
                for ch in 0..c {
                    let frow = &fd[ch * n..(ch + 1) * n];
                    let drow = &mut gfd[ch * n..(ch + 1) * n];
                    for p in 0..n {
                        // sum_q f[ch,q] * (gbar[p,q] + gbar[q,p])
                        let mut acc = T::zero();
                        for q in 0..n {
                            acc = frow[q].mul_add(gd[p * n + q] + gd[q * n + p], acc);
                        }
                        drow[p] += acc;
                    }
                }
            }
            Op::NormalizeColumns { x, eps } => {
                // y = v * r with r = (|v|^2 + eps)^{-1/2}
                // v_bar = g*r - v * (g.v) * r^3
                let (x, eps) = (*x, *eps);
                let (c, n) = self.value(x).dims2()?;
                let fd = self.value(x).data().to_vec();
                let gx = self.slot(grads, x);
                let gxd = gx.data_mut();
                for p in 0..n {
                    let mut s = T::zero();
                    let mut dot_gv = T::zero();
                    for ch in 0..c {
                        let v = fd[ch * n + p];
                        s = v.mul_add(v, s);
                        dot_gv = gd[ch * n + p].mul_add(v, dot_gv);
                    }
                    let r = T::one() / (s + eps).sqrt();
                    let r3 = r * r * r;
                    let k = dot_gv * r3;
                    for ch in 0..c {
                        gxd[ch * n + p] += gd[ch * n + p] * r - fd[ch * n + p] * k;
                    }
                }
            }
            Op::ExtractPatch { x, y0, x0, ph, pw } => {
                let (x, y0, x0, ph, pw) = (*x, *y0, *x0, *ph, *pw);
                let (c, h, w) = self.value(x).dims3()?;
                let np = ph * pw;
                let gx = self.slot(grads, x);
                let gxd = gx.data_mut();
                for ch in 0..c {
                    for dy in 0..ph {
                        let dst = (ch * h + y0 + dy) * w + x0;
                        let src = ch * np + dy * pw;
                        for (d, &s) in gxd[dst..dst + pw].iter_mut().zip(&gd[src..src + pw]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Squeeze { x, r } => {
                let back = shuffle::unsqueeze(g, *r)?;
                add_into(self.slot(grads, *x), &back);
            }
            Op::Unsqueeze { x, r } => {
                let back = shuffle::squeeze(g, *r)?;
                add_into(self.slot(grads, *x), &back);
            }
            Op::Reshape(x) => {
                let gx = self.slot(grads, *x);
                for (d, &s) in gx.data_mut().iter_mut().zip(gd) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_graph, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_through_shared_nodes() {
        // loss = sum(x + x) -> gradient 2 everywhere
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[3], 1.5));
        let two_x = tape.add(x, x).unwrap();
        let loss = tape.sum_all(two_x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }

    /// Every primitive against central differences, >= 20 random seeds.
    /// Inputs for kinked ops (relu family, abs, clamp) are kept away from
    /// their kink by a margin well above the FD step.
    #[test]
    fn primitives_match_finite_differences_over_seeds() {
        let opts = GradCheckOptions::default(); // tol 1e-4, step 1e-5

        // weighted sum with fixed coefficients turns any output into a scalar
        fn spend(tape: &mut Tape<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
            let shape = tape.value(y).shape().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let coef = tape.leaf(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng));
            let prod = tape.mul(y, coef)?;
            Ok(tape.sum_all(prod))
        }

        fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64]) -> Tensor<f64> {
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if kinks.iter().all(|&k| (v - k).abs() > 0.05) {
                    break v;
                }
            })
        }

        for seed in 0..22u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let kinked = away_from(&mut rng, &[3, 4, 4], &[0.0, -0.5, 0.5]);
            let positive = Tensor::<f64>::rand_uniform(&[3, 4, 4], 0.3, 2.0, &mut rng);
            let vec_c = Tensor::<f64>::rand_uniform(&[3], 0.4, 1.5, &mut rng);
            let scalar_s = Tensor::<f64>::rand_uniform(&[1], -0.8, 0.8, &mut rng);
            let kernel = Tensor::<f64>::rand_normal(&[2, 3, 3, 3], 0.4, &mut rng);
            let bias2 = Tensor::<f64>::rand_uniform(&[2], -0.3, 0.3, &mut rng);
            let wmat = Tensor::<f64>::rand_normal(&[4, 48], 0.3, &mut rng);
            let bias4 = Tensor::<f64>::rand_uniform(&[4], -0.3, 0.3, &mut rng);
            let fmat = Tensor::<f64>::rand_uniform(&[5, 6], -1.0, 1.0, &mut rng);

            type Builder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;
            let cases: Vec<(&str, Vec<Tensor<f64>>, Builder)> = vec![
                ("add", vec![a.clone(), b.clone()], Box::new(move |t, ids| {
                    let y = t.add(ids[0], ids[1])?;
                    spend(t, y, 1)
                })),
                ("sub", vec![a.clone(), b.clone()], Box::new(move |t, ids| {
                    let y = t.sub(ids[0], ids[1])?;
                    spend(t, y, 2)
                })),
                ("mul", vec![a.clone(), b.clone()], Box::new(move |t, ids| {
                    let y = t.mul(ids[0], ids[1])?;
                    spend(t, y, 3)
                })),
                ("scalar_ops", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.mul_scalar(ids[0], -1.7);
                    let y = t.add_scalar(y, 0.3);
                    spend(t, y, 4)
                })),
                ("scale_by_node", vec![a.clone(), scalar_s.clone()], Box::new(move |t, ids| {
                    let y = t.scale_by_node(ids[0], ids[1])?;
                    spend(t, y, 5)
                })),
                ("relu", vec![kinked.clone()], Box::new(move |t, ids| {
                    let y = t.relu(ids[0]);
                    spend(t, y, 6)
                })),
                ("leaky_relu", vec![kinked.clone()], Box::new(move |t, ids| {
                    let y = t.leaky_relu(ids[0], 0.2);
                    spend(t, y, 7)
                })),
                ("tanh", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.tanh(ids[0]);
                    spend(t, y, 8)
                })),
                ("sigmoid", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.sigmoid(ids[0]);
                    spend(t, y, 9)
                })),
                ("sqrt", vec![positive.clone()], Box::new(move |t, ids| {
                    let y = t.sqrt(ids[0]);
                    spend(t, y, 10)
                })),
                ("abs", vec![kinked.clone()], Box::new(move |t, ids| {
                    let y = t.abs(ids[0]);
                    spend(t, y, 11)
                })),
                ("clamp", vec![kinked.clone()], Box::new(move |t, ids| {
                    let y = t.clamp(ids[0], -0.5, 0.5);
                    spend(t, y, 12)
                })),
                ("conv2d", vec![a.clone(), kernel.clone(), bias2.clone()], Box::new(move |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                    spend(t, y, 13)
                })),
                ("conv2d_strided", vec![a.clone(), kernel.clone(), bias2.clone()], Box::new(move |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                    spend(t, y, 14)
                })),
                ("linear", vec![a.clone(), wmat.clone(), bias4.clone()], Box::new(move |t, ids| {
                    let x48 = t.reshape(ids[0], vec![48])?;
                    let y = t.linear(x48, ids[1], ids[2])?;
                    spend(t, y, 15)
                })),
                ("concat_narrow", vec![a.clone(), b.clone()], Box::new(move |t, ids| {
                    let c = t.concat(&[ids[0], ids[1]])?;
                    let n = t.narrow(c, 2, 3)?;
                    spend(t, n, 16)
                })),
                ("gather", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.gather(ids[0], &[2, 0, 2])?;
                    spend(t, y, 17)
                })),
                ("channel_mean", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.channel_mean(ids[0])?;
                    spend(t, y, 18)
                })),
                ("channel_std", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.channel_std(ids[0], 1e-5)?;
                    spend(t, y, 19)
                })),
                ("bcast_add_sub", vec![a.clone(), vec_c.clone()], Box::new(move |t, ids| {
                    let y = t.bcast_add(ids[0], ids[1])?;
                    let z = t.bcast_sub(y, ids[1])?;
                    let w = t.bcast_add(z, ids[1])?;
                    spend(t, w, 20)
                })),
                ("bcast_mul_div", vec![a.clone(), vec_c.clone()], Box::new(move |t, ids| {
                    let y = t.bcast_mul(ids[0], ids[1])?;
                    let z = t.bcast_div(y, ids[1])?;
                    let w = t.bcast_mul(z, ids[1])?;
                    spend(t, w, 21)
                })),
                ("mean_all", vec![a.clone()], Box::new(move |t, ids| {
                    Ok(t.mean_all(ids[0]))
                })),
                ("gram", vec![fmat.clone()], Box::new(move |t, ids| {
                    let y = t.gram(ids[0])?;
                    spend(t, y, 22)
                })),
                ("normalize_columns", vec![fmat.clone()], Box::new(move |t, ids| {
                    let y = t.normalize_columns(ids[0], 1e-8)?;
                    spend(t, y, 23)
                })),
                ("extract_patch", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.extract_patch(ids[0], 1, 1, 2, 3)?;
                    spend(t, y, 24)
                })),
                ("squeeze_unsqueeze", vec![a.clone()], Box::new(move |t, ids| {
                    let y = t.squeeze(ids[0], 2)?;
                    let z = t.unsqueeze(y, 2)?;
                    spend(t, z, 25)
                })),
            ];

            for (name, point, build) in cases {
                let report = grad_check_graph(&build, &point, &opts).unwrap();
                assert!(report.pass, "primitive {name} seed {seed}: {report}");
            }
        }
    }

    /// Composite conv -> stats -> normalize graph, the shape of the AAN core.
    #[test]
    fn composite_conv_stats_norm_graph_matches_fd() {
        let opts = GradCheckOptions {
            tol: 1e-4,
            ..Default::default()
        };
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::<f64>::rand_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::rand_normal(&[3, 2, 3, 3], 0.4, &mut rng);
            let b = Tensor::<f64>::rand_uniform(&[3], -0.2, 0.2, &mut rng);
            let point = vec![x, w, b];
            let report = grad_check_graph(
                |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                    let mu = t.channel_mean(y)?;
                    let sigma = t.channel_std(y, 1e-5)?;
                    let shifted = t.bcast_sub(y, mu)?;
                    let denom = t.add_scalar(sigma, 1e-5);
                    let normed = t.bcast_div(shifted, denom)?;
                    let sq = t.mul(normed, normed)?;
                    Ok(t.mean_all(sq))
                },
                &point,
                &opts,
            )
            .unwrap();
            assert!(report.pass, "seed {seed}: {report}");
        }
    }

    #[test]
    fn cache_ids_differ_between_tapes() {
        let t1 = Tape::<f32>::new();
        let t2 = Tape::<f32>::new();
        assert_ne!(t1.id(), t2.id());
    }
}
