//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its value and whatever the backward rule needs. Calling
//! [`Graph::backward`] walks the tape in reverse creation order, so gradient
//! accumulation order (and therefore every floating-point result) is fixed
//! for a given sequence of operations.
//!
//! Nodes built only from constants or frozen parameters do not require
//! gradients and are skipped entirely during the backward pass.

use std::collections::HashMap;

use crate::conv::{col2im, im2col_into, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, out_channels: usize },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    AddChannelBias { x: Var, bias: Var },
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    AddBias { x: Var, bias: Var },
    ToTokens(Var),
    Mean(Var),
    MeanAbsDiff { x: Var, target: Tensor<T> },
    MeanSquaredDiff { x: Var, target: Tensor<T> },
    CosineDistill { p: Var, target: Tensor<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape. Build one per step; drop it after reading gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<(u64, ParamId), Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bindings: HashMap<(u64, ParamId), Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of `store`, in store order. Parameters
    /// that were not bound, or that received no gradient, map to `None`.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.bindings.get(&(store.uid(), ParamId(i))).and_then(|v| self.grads[v.0].clone()))
            .collect()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a trainable parameter. Binding the same parameter twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.bind(store, id, true)
    }

    /// Bind a parameter whose gradient is never needed.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.bind(store, id, false)
    }

    fn bind(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.bindings.insert(key, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(NnError::Shape(format!("conv2d expects [N,C,H,W] and [O,C,k,k], got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(NnError::Shape(format!("conv2d input has {} channels but weight expects {}", xs[1], ws[1])));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(NnError::Shape(format!("conv2d kernel {} does not fit input {xs:?}", ws[2])));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(NnError::Shape(format!("conv2d bias shape {:?}", self.value(b).shape())));
            }
        }
        let geom =
            ConvGeometry { batch: xs[0], in_channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let out_channels = ws[0];
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let hw = ho * wo;
        let sample = geom.sample();
        let in_len = xs[1] * xs[2] * xs[3];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); geom.batch * out_channels * hw];
        let mut cols = Vec::new();
        for n in 0..geom.batch {
            let cols_n = sample_cols(&xd[n * in_len..(n + 1) * in_len], &sample, &mut cols);
            gemm(
                MatRef::row_major(wd, out_channels, geom.patch_len()),
                MatRef::row_major(cols_n, geom.patch_len(), hw),
                T::zero(),
                &mut out[n * out_channels * hw..(n + 1) * out_channels * hw],
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let bo = bias[i % out_channels];
                chunk.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
        let value = Tensor::from_vec(&[geom.batch, out_channels, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, out_channels }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(NnError::Shape(format!("upsample expects rank 4, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for plane in 0..s[0] * s[1] {
            let sp = &src[plane * h * w..][..h * w];
            let dp = &mut out[plane * 4 * h * w..][..4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dp[i * 2 * w + j] = sp[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(NnError::Shape(format!("group_norm: {s:?} with {groups} groups")));
        }
        let c = s[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(NnError::Shape("group_norm affine parameters must have shape [C]".into()));
        }
        let hw = s[2] * s[3];
        let cg = c / groups;
        let m = cg * hw;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); s[0] * groups];
        for n in 0..s[0] {
            for g in 0..groups {
                let start = (n * c + g * cg) * hw;
                let chunk = &xd[start..start + m];
                let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
                let r = T::from_f64_lossy(1.0 / (var + eps.as_f64()).sqrt());
                let mean = T::from_f64_lossy(mean);
                rstd[n * groups + g] = r;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for p in 0..hw {
                        let idx = start + ci * hw + p;
                        let xh = (xd[idx] - mean) * r;
                        xhat[idx] = xh;
                        out[idx] = xh * gd[ch] + bd[ch];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg))
    }

    /// `x: [M, K]`, `w: [O, K]`, `b: [O]` → `x·wᵀ + b : [M, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (m, k, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); m * o];
        gemm(
            MatRef::row_major(self.value(x).data(), m, k),
            MatRef::transposed(self.value(w).data(), k, o),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != o {
                return Err(NnError::Shape(format!("linear bias has {} entries, expected {o}", bd.len())));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::from_vec(&[m, o], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Add a per-sample, per-channel bias `[N, C]` to `[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || bs != [xs[0], xs[1]] {
            return Err(NnError::Shape(format!("channel bias {bs:?} does not fit {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            for v in chunk {
                *v = *v + bd[plane];
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` of a `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || start + len > s[1] {
            return Err(NnError::Shape(format!("cannot take channels {start}..{} of {s:?}", start + len)));
        }
        let hw = s[2] * s[3];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * hw);
        for b in 0..s[0] {
            data.extend_from_slice(&src[(b * s[1] + start) * hw..][..len * hw]);
        }
        let value = Tensor::from_vec(&[s[0], len, s[2], s[3]], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Add a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || self.value(bias).shape() != [s[1]] {
            return Err(NnError::Shape(format!("bias {:?} does not fit {s:?}", self.value(bias).shape())));
        }
        let hw = s[2] * s[3];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            let b = bd[plane % s[1]];
            for v in chunk {
                *v = *v + b;
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Row-major spatial flatten `[N, C, H, W]` → `[N·H·W, C]`; token
    /// `n·H·W + r·W + c` holds the channel vector at row `r`, column `c`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(NnError::Shape(format!("to_tokens expects rank 4, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::from_vec(&[n * hw, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ToTokens(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::from_usize(v.numel()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean absolute error against a constant target (L1, mean reduction).
    pub fn mean_abs_diff(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(&target)?;
        let n = T::from_usize(target.numel()).unwrap();
        let s: T = self.value(x).data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff { x, target }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mean_squared_diff(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(&target)?;
        let n = T::from_usize(target.numel()).unwrap();
        let s: T = self.value(x).data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanSquaredDiff { x, target }, rg))
    }

    /// Negative mean row-wise cosine similarity between `p: [R, D]` and a
    /// constant target `[R, D]`. Norms are clamped below by `eps`.
    pub fn cosine_distill(&mut self, p: Var, target: Tensor<T>, eps: T) -> Result<Var> {
        let ps = self.value(p).shape().to_vec();
        if ps.len() != 2 {
            return Err(NnError::Shape(format!("cosine_distill expects [R, D], got {ps:?}")));
        }
        self.value(p).expect_same_shape(&target)?;
        let cos = row_cosines(self.value(p).data(), target.data(), ps[1], eps);
        let r = T::from_usize(ps[0].max(1)).unwrap();
        let loss = -(cos.iter().copied().sum::<T>() / r);
        let rg = self.any_grad(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::CosineDistill { p, target, eps }, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            for (target, g) in self.backprop_node(node, &gy)? {
                accumulate(&mut grads, target, g);
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads, bindings: self.bindings.clone() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.zip_map(self.value(*b), |g, y| g * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, gy.zip_map(self.value(*a), |g, x| g * x)?));
                }
            }
            Op::Scale(a, c) => {
                // A zero factor contributes nothing; skipping it keeps the
                // other gradient paths bit-identical to a graph without it.
                if self.wants(*a) && !c.is_zero() {
                    let c = *c;
                    out.push((*a, gy.map(|g| g * c)));
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    out.push((
                        *a,
                        gy.zip_map(self.value(*a), |g, x| {
                            let s = sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })?,
                    ));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    out.push((*a, gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))?));
                }
            }
            Op::Conv2d { x, w, b, geom, out_channels } => {
                // Columns are recomputed per sample rather than stored.
                let oc = *out_channels;
                let hw = geom.out_height() * geom.out_width();
                let patch = geom.patch_len();
                let sample = geom.sample();
                let xv = self.value(*x);
                let in_len = xv.numel() / geom.batch;
                let wd = self.value(*w).data();
                let dy = gy.data();
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); oc * patch];
                    let mut cols = Vec::new();
                    for n in 0..geom.batch {
                        let cols_n = sample_cols(&xv.data()[n * in_len..(n + 1) * in_len], &sample, &mut cols);
                        gemm(
                            MatRef::row_major(&dy[n * oc * hw..(n + 1) * oc * hw], oc, hw),
                            MatRef::transposed(cols_n, hw, patch),
                            T::one(),
                            &mut dw,
                        );
                    }
                    out.push((*w, Tensor::from_vec(self.value(*w).shape(), dw)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); oc];
                        for (i, chunk) in dy.chunks(hw).enumerate() {
                            db[i % oc] = db[i % oc] + chunk.iter().copied().sum();
                        }
                        out.push((*b, Tensor::from_vec(&[oc], db)?));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    let direct = sample.is_pointwise();
                    let mut dcols = if direct { Vec::new() } else { vec![T::zero(); patch * hw] };
                    for n in 0..geom.batch {
                        let dx_n = &mut dx[n * in_len..(n + 1) * in_len];
                        let target: &mut [T] = if direct { dx_n } else { &mut dcols };
                        gemm(
                            MatRef::transposed(wd, patch, oc),
                            MatRef::row_major(&dy[n * oc * hw..(n + 1) * oc * hw], oc, hw),
                            T::zero(),
                            target,
                        );
                        if !direct {
                            col2im(&dcols, &sample, &mut dx[n * in_len..(n + 1) * in_len]);
                        }
                    }
                    out.push((*x, Tensor::from_vec(xv.shape(), dx)?));
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for plane in 0..s[0] * s[1] {
                        let gp = &gy.data()[plane * 4 * h * w..][..4 * h * w];
                        let dp = &mut dx[plane * h * w..][..h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                let d = &mut dp[(i / 2) * w + j / 2];
                                *d = *d + gp[i * 2 * w + j];
                            }
                        }
                    }
                    out.push((*x, Tensor::from_vec(s, dx)?));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let s = self.value(*x).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let cg = c / groups;
                let m = T::from_usize(cg * hw).unwrap();
                let gd = self.value(*gamma).data();
                let dy = gy.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                dgamma[ch] = dgamma[ch] + dy[base + p] * xhat[base + p];
                                dbeta[ch] = dbeta[ch] + dy[base + p];
                            }
                        }
                    }
                    if self.wants(*gamma) {
                        out.push((*gamma, Tensor::from_vec(&[c], dgamma)?));
                    }
                    if self.wants(*beta) {
                        out.push((*beta, Tensor::from_vec(&[c], dbeta)?));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for b in 0..n {
                        for g in 0..*groups {
                            let start = (b * c + g * cg) * hw;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for ci in 0..cg {
                                let gm = gd[g * cg + ci];
                                for p in 0..hw {
                                    let idx = start + ci * hw + p;
                                    let dxh = dy[idx] * gm;
                                    s1 = s1 + dxh;
                                    s2 = s2 + dxh * xhat[idx];
                                }
                            }
                            let r = rstd[b * groups + g];
                            for ci in 0..cg {
                                let gm = gd[g * cg + ci];
                                for p in 0..hw {
                                    let idx = start + ci * hw + p;
                                    let dxh = dy[idx] * gm;
                                    dx[idx] = r * (dxh - s1 / m - xhat[idx] * s2 / m);
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::from_vec(s, dx)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(
                        MatRef::row_major(gy.data(), m, o),
                        MatRef::row_major(self.value(*w).data(), o, k),
                        T::zero(),
                        &mut dx,
                    );
                    out.push((*x, Tensor::from_vec(&[m, k], dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * k];
                    gemm(
                        MatRef::transposed(gy.data(), o, m),
                        MatRef::row_major(self.value(*x).data(), m, k),
                        T::zero(),
                        &mut dw,
                    );
                    out.push((*w, Tensor::from_vec(&[o, k], dw)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d = *d + g;
                            }
                        }
                        out.push((*b, Tensor::from_vec(&[o], db)?));
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, gy.clone()));
                }
                if self.wants(*bias) {
                    let s = gy.shape();
                    let hw = s[2] * s[3];
                    let db: Vec<T> = gy.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                    out.push((*bias, Tensor::from_vec(&[s[0], s[1]], db)?));
                }
            }
            Op::ConcatChannels(parts) => {
                let s = gy.shape();
                let (n, hw) = (s[0], s[2] * s[3]);
                let total = s[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            d.extend_from_slice(&gy.data()[(b * total + offset) * hw..][..pc * hw]);
                        }
                        out.push((p, Tensor::from_vec(self.value(p).shape(), d)?));
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.wants(*x) {
                    let s = self.value(*x).shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let len = gy.shape()[1];
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for b in 0..n {
                        dx[(b * c + start) * hw..][..len * hw].copy_from_slice(&gy.data()[b * len * hw..][..len * hw]);
                    }
                    out.push((*x, Tensor::from_vec(s, dx)?));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, gy.clone()));
                }
                if self.wants(*bias) {
                    let s = gy.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); c];
                    for (plane, chunk) in gy.data().chunks(hw).enumerate() {
                        let acc: T = chunk.iter().copied().sum();
                        db[plane % c] = db[plane % c] + acc;
                    }
                    out.push((*bias, Tensor::from_vec(&[c], db)?));
                }
            }
            Op::ToTokens(x) => {
                if self.wants(*x) {
                    let s = self.value(*x).shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut dx = vec![T::zero(); gy.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(b * c + ch) * hw + p] = gy.data()[(b * hw + p) * c + ch];
                            }
                        }
                    }
                    out.push((*x, Tensor::from_vec(s, dx)?));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = T::from_usize(self.value(*x).numel()).unwrap();
                    let g = gy.item() / n;
                    out.push((*x, Tensor::full(self.value(*x).shape(), g)));
                }
            }
            Op::MeanAbsDiff { x, target } => {
                if self.wants(*x) {
                    let n = T::from_usize(target.numel()).unwrap();
                    let g = gy.item() / n;
                    out.push((
                        *x,
                        self.value(*x).zip_map(target, |a, b| {
                            let d = a - b;
                            if d > T::zero() {
                                g
                            } else if d < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })?,
                    ));
                }
            }
            Op::MeanSquaredDiff { x, target } => {
                if self.wants(*x) {
                    let n = T::from_usize(target.numel()).unwrap();
                    let two = T::from_f64_lossy(2.0);
                    let g = gy.item() / n;
                    out.push((*x, self.value(*x).zip_map(target, |a, b| two * (a - b) * g)?));
                }
            }
            Op::CosineDistill { p, target, eps } => {
                if self.wants(*p) {
                    let pv = self.value(*p);
                    let (r, d) = (pv.shape()[0], pv.shape()[1]);
                    let scale = -gy.item() / T::from_usize(r.max(1)).unwrap();
                    let mut dp = vec![T::zero(); r * d];
                    for i in 0..r {
                        let pr = &pv.data()[i * d..(i + 1) * d];
                        let hr = &target.data()[i * d..(i + 1) * d];
                        let dot: T = pr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let np = pr.iter().map(|&a| a * a).sum::<T>().sqrt();
                        let nh = hr.iter().map(|&a| a * a).sum::<T>().sqrt().max(*eps);
                        let out_row = &mut dp[i * d..(i + 1) * d];
                        if np > *eps {
                            let inv = T::one() / (nh * np);
                            let c = dot / (nh * np * np * np);
                            for j in 0..d {
                                out_row[j] = scale * (hr[j] * inv - pr[j] * c);
                            }
                        } else {
                            let inv = T::one() / (nh * *eps);
                            for j in 0..d {
                                out_row[j] = scale * hr[j] * inv;
                            }
                        }
                    }
                    out.push((*p, Tensor::from_vec(&[r, d], dp)?));
                }
            }
        }
        Ok(out)
    }
}

/// Per-row cosine similarity with norms clamped below by `eps`, each value
/// clamped to `[-1, 1]`.
/// Column matrix of one sample; a 1×1, stride-1 convolution uses the input
/// directly.
fn sample_cols<'a, T: Scalar>(x: &'a [T], g: &ConvGeometry, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        return x;
    }
    buf.clear();
    buf.resize(g.patch_len() * g.positions(), T::zero());
    im2col_into(x, g, buf);
    buf
}

pub fn row_cosines<T: Scalar>(p: &[T], h: &[T], dim: usize, eps: T) -> Vec<T> {
    p.chunks(dim)
        .zip(h.chunks(dim))
        .map(|(pr, hr)| {
            let dot: T = pr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
            let np = pr.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
            let nh = hr.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
            (dot / (np * nh)).max(-T::one()).min(T::one())
        })
        .collect()
}
