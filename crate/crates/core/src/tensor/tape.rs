//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] runs one forward pass (optionally recording) and, when
//! recording, can replay the recorded operations once in exact reverse
//! execution order to produce gradients. Records hold `Arc` clones of the
//! tensors their backward rules need; the backward pass drops each record as
//! soon as it has been consumed, so live bytes shrink while gradients
//! propagate. A non-recording tape keeps nothing, which is what inference
//! benchmarking measures.

use std::collections::HashMap;

use super::kernels;
use super::{bytes, ensure_finite, Element, Param, ParamId, Result, Tensor, TensorError};

/// Boundary handling for the convolution operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// Zero padding of (k-1)/2: output keeps the input's spatial dims at stride 1.
    Zero,
    /// No padding.
    None,
}

impl PaddingMode {
    fn amount(self, k: usize) -> usize {
        match self {
            PaddingMode::Zero => (k - 1) / 2,
            PaddingMode::None => 0,
        }
    }
}

/// A tensor value flowing through a tape, possibly tracked for gradients.
#[derive(Clone, Debug)]
pub struct Var<E: Element> {
    value: Tensor<E>,
    node: Option<usize>,
}

impl<E: Element> Var<E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> E {
        self.value.item()
    }

    fn untracked(value: Tensor<E>) -> Self {
        Var { value, node: None }
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<E: Element> {
    params: HashMap<ParamId, Tensor<E>>,
    retained: HashMap<usize, Tensor<E>>,
}

impl<E: Element> Grads<E> {
    /// Gradient for a parameter; `None` when no gradient flowed to it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.get(&id)
    }

    /// Gradient for a var previously marked with [`Tape::retain_grad`].
    pub fn retained(&self, var: &Var<E>) -> Option<&Tensor<E>> {
        var.node.and_then(|n| self.retained.get(&n))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

// ── Records ─────────────────────────────────────────────────────────

enum Op<E: Element> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize, av: Tensor<E>, bv: Tensor<E> },
    Scale { x: usize, k: E },
    AddScalar { x: usize },
    Reshape { x: usize },
    ConcatLast { parts: Vec<(usize, usize)> },
    SliceLast { x: usize, from: usize, c_in: usize },
    Linear { x: usize, w: usize, b: Option<usize>, xv: Tensor<E>, wv: Tensor<E> },
    Conv { x: usize, k: usize, b: Option<usize>, xv: Tensor<E>, kv: Tensor<E>, stride: usize, pad: usize },
    ConvT { x: usize, k: usize, b: Option<usize>, xv: Tensor<E>, kv: Tensor<E>, stride: usize, pad: usize },
    LayerNorm { x: usize, g: usize, bt: usize, xhat: Tensor<E>, inv_std: Tensor<E>, gv: Tensor<E> },
    BatchNormTrain { x: usize, g: usize, bt: usize, xhat: Tensor<E>, inv_std: Tensor<E>, gv: Tensor<E> },
    BatchNormEval { x: usize, g: usize, bt: usize, xhat: Tensor<E>, scale: Tensor<E> },
    Swish { x: usize, xv: Tensor<E> },
    Gelu { x: usize, xv: Tensor<E> },
    Sigmoid { x: usize, out: Tensor<E> },
    Relu { x: usize, xv: Tensor<E> },
    LocalAttention {
        q: usize,
        k: usize,
        v: usize,
        qv: Tensor<E>,
        kv: Tensor<E>,
        vv: Tensor<E>,
        probs: Tensor<E>,
        heads: usize,
    },
    Dropout { x: usize, mask: Tensor<E> },
    MulCellMap { x: usize, map: usize, xv: Tensor<E>, mapv: Tensor<E> },
    MaskedResidual { state: usize, delta: usize, mask: Tensor<E> },
    Mse { a: usize, b: usize, av: Tensor<E>, bv: Tensor<E> },
    L1Clip { x: usize, xv: Tensor<E>, lo: E, hi: E },
}

struct Record<E: Element> {
    op: Op<E>,
    shape: Vec<usize>,
    param: Option<ParamId>,
    retain: bool,
}

// ── Gradient buffers ────────────────────────────────────────────────

/// Mutable gradient accumulator participating in byte accounting.
struct GradBuf<E: Element> {
    v: Vec<E>,
}

impl<E: Element> GradBuf<E> {
    fn zeros(len: usize) -> Result<Self> {
        bytes::register(len * std::mem::size_of::<E>())?;
        Ok(GradBuf { v: vec![E::ZERO; len] })
    }

    fn from_vec(v: Vec<E>) -> Result<Self> {
        bytes::register(std::mem::size_of_val(&v[..]))?;
        Ok(GradBuf { v })
    }

    fn add_assign(&mut self, rhs: &[E]) {
        debug_assert_eq!(self.v.len(), rhs.len());
        for (a, &b) in self.v.iter_mut().zip(rhs) {
            *a = *a + b;
        }
    }

    fn into_tensor(mut self, shape: &[usize]) -> Result<Tensor<E>> {
        let v = std::mem::take(&mut self.v);
        bytes::unregister(std::mem::size_of_val(&v[..]));
        Tensor::from_vec(shape, v)
    }
}

impl<E: Element> Drop for GradBuf<E> {
    fn drop(&mut self) {
        bytes::unregister(std::mem::size_of_val(&self.v[..]));
    }
}

// ── The tape ────────────────────────────────────────────────────────

pub struct Tape<E: Element> {
    records: Vec<Record<E>>,
    watched: HashMap<ParamId, usize>,
    recording: bool,
    peak_at_creation: usize,
}

impl<E: Element> Tape<E> {
    /// A recording tape for one forward+backward pass.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A pass-through tape: operators compute values and keep nothing.
    pub fn eval() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        bytes::reset_peak();
        Tape {
            records: Vec::new(),
            watched: HashMap::new(),
            recording,
            peak_at_creation: bytes::peak(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// High-water mark of live tensor bytes since this tape was created.
    pub fn peak_bytes(&self) -> usize {
        bytes::peak().max(self.peak_at_creation)
    }

    fn push(&mut self, op: Op<E>, shape: &[usize]) -> Option<usize> {
        if !self.recording {
            return None;
        }
        self.records.push(Record {
            op,
            shape: shape.to_vec(),
            param: None,
            retain: false,
        });
        Some(self.records.len() - 1)
    }

    fn out(&mut self, op: Op<E>, value: Tensor<E>, tracked: bool) -> Var<E> {
        let node = if tracked { self.push(op, value.shape()) } else { None };
        Var { value, node }
    }

    fn any_tracked(&self, vars: &[&Var<E>]) -> bool {
        self.recording && vars.iter().any(|v| v.node.is_some())
    }

    /// Wraps a tensor as a constant (no gradient).
    pub fn constant(&mut self, value: &Tensor<E>) -> Var<E> {
        Var::untracked(value.clone())
    }

    /// Registers a parameter for gradient tracking. Repeated watches of the
    /// same parameter return the same node so gradients accumulate; frozen
    /// (non-trainable) parameters pass through as constants.
    pub fn watch(&mut self, param: &Param<E>) -> Var<E> {
        if !self.recording || !param.trainable() {
            return Var::untracked(param.value().clone());
        }
        if let Some(&node) = self.watched.get(&param.id()) {
            return Var {
                value: param.value().clone(),
                node: Some(node),
            };
        }
        let node = self
            .push(Op::Leaf, param.value().shape())
            .expect("recording tape");
        self.records[node].param = Some(param.id());
        self.watched.insert(param.id(), node);
        Var {
            value: param.value().clone(),
            node: Some(node),
        }
    }

    /// Marks a var as an input whose gradient should be kept (leaf vars only
    /// make sense here, but any node works).
    pub fn retain_grad(&mut self, var: &mut Var<E>) {
        if !self.recording {
            return;
        }
        if var.node.is_none() {
            let node = self.push(Op::Leaf, var.value.shape()).expect("recording tape");
            var.node = Some(node);
        }
        let node = var.node.unwrap();
        self.records[node].retain = true;
    }

    // ── Pointwise and shape ops ─────────────────────────────────

    pub fn add(&mut self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("add", a, b)?;
        let value = zip_new(a.value(), b.value(), |x, y| x + y)?;
        ensure_finite("add", &value)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.out(Op::Add { a: node_of(a), b: node_of(b) }, value, tracked))
    }

    pub fn sub(&mut self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("sub", a, b)?;
        let value = zip_new(a.value(), b.value(), |x, y| x - y)?;
        ensure_finite("sub", &value)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.out(Op::Sub { a: node_of(a), b: node_of(b) }, value, tracked))
    }

    pub fn hadamard(&mut self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("hadamard", a, b)?;
        let value = zip_new(a.value(), b.value(), |x, y| x * y)?;
        ensure_finite("hadamard", &value)?;
        let tracked = self.any_tracked(&[a, b]);
        let op = Op::Hadamard {
            a: node_of(a),
            b: node_of(b),
            av: a.value().clone(),
            bv: b.value().clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    pub fn scale(&mut self, x: &Var<E>, k: E) -> Result<Var<E>> {
        let value = x.value().map(|v| v * k)?;
        ensure_finite("scale", &value)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Scale { x: node_of(x), k }, value, tracked))
    }

    pub fn add_scalar(&mut self, x: &Var<E>, c: E) -> Result<Var<E>> {
        let value = x.value().map(|v| v + c)?;
        ensure_finite("add_scalar", &value)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::AddScalar { x: node_of(x) }, value, tracked))
    }

    pub fn reshape(&mut self, x: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
        let value = x.value().reshape(shape)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Reshape { x: node_of(x) }, value, tracked))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[&Var<E>]) -> Result<Var<E>> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_last", detail: "no parts".into() });
        }
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let rows: usize = lead.iter().product();
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    detail: format!("{:?} vs {:?}", parts[0].shape(), s),
                });
            }
            c_total += s[s.len() - 1];
        }
        let mut data = vec![E::ZERO; rows * c_total];
        let mut offset = 0;
        for p in parts {
            let c = p.shape()[p.shape().len() - 1];
            let src = p.value().data();
            for r in 0..rows {
                data[r * c_total + offset..r * c_total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut shape = lead.to_vec();
        shape.push(c_total);
        let value = Tensor::from_vec(&shape, data)?;
        let tracked = self.recording && parts.iter().any(|p| p.node.is_some());
        let op = Op::ConcatLast {
            parts: parts
                .iter()
                .map(|p| (node_of(p), p.shape()[p.shape().len() - 1]))
                .collect(),
        };
        Ok(self.out(op, value, tracked))
    }

    /// Slice [from, to) of the last axis.
    pub fn slice_last(&mut self, x: &Var<E>, from: usize, to: usize) -> Result<Var<E>> {
        let s = x.shape();
        let c_in = s[s.len() - 1];
        if from >= to || to > c_in {
            return Err(TensorError::InvalidArg {
                op: "slice_last",
                detail: format!("range {}..{} of {}", from, to, c_in),
            });
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let c = to - from;
        let src = x.value().data();
        let mut data = vec![E::ZERO; rows * c];
        for r in 0..rows {
            data[r * c..(r + 1) * c].copy_from_slice(&src[r * c_in + from..r * c_in + to]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(c);
        let value = Tensor::from_vec(&shape, data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::SliceLast { x: node_of(x), from, c_in }, value, tracked))
    }

    /// Splits the last axis in half; errors on odd extent.
    pub fn split_half(&mut self, x: &Var<E>) -> Result<(Var<E>, Var<E>)> {
        let c = *x.shape().last().expect("non-empty shape");
        if c % 2 != 0 {
            return Err(TensorError::InvalidArg {
                op: "split_half",
                detail: format!("odd channel count {}", c),
            });
        }
        Ok((self.slice_last(x, 0, c / 2)?, self.slice_last(x, c / 2, c)?))
    }

    // ── Dense / convolution ─────────────────────────────────────

    /// x: [..., ci] times w: [ci, co] plus optional bias [co].
    pub fn linear(&mut self, x: &Var<E>, w: &Var<E>, b: Option<&Var<E>>) -> Result<Var<E>> {
        let xs = x.shape();
        let ws = w.shape();
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?} w {:?}", xs, ws),
            });
        }
        let (ci, co) = (ws[0], ws[1]);
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let mut data = kernels::matmul_nn(x.value().data(), w.value().data(), rows, ci, co);
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias {:?} want [{}]", b.shape(), co),
                });
            }
            let bd = b.value().data();
            for r in 0..rows {
                for (o, &bv) in data[r * co..(r + 1) * co].iter_mut().zip(bd) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(co);
        let value = Tensor::from_vec(&shape, data)?;
        ensure_finite("linear", &value)?;
        let mut inputs: Vec<&Var<E>> = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let tracked = self.any_tracked(&inputs);
        let op = Op::Linear {
            x: node_of(x),
            w: node_of(w),
            b: b.map(node_of),
            xv: x.value().clone(),
            wv: w.value().clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    /// Cross-correlation of x [B,H,W,Ci] with kernel [Kh,Kw,Ci,Co].
    pub fn conv2d(
        &mut self,
        x: &Var<E>,
        k: &Var<E>,
        b: Option<&Var<E>>,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Var<E>> {
        let (bn, h, w, ci) = x.value().dims4();
        let ks = k.shape();
        if ks.len() != 4 || ks[2] != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?} kernel {:?}", x.shape(), ks),
            });
        }
        let (kh, kw, co) = (ks[0], ks[1], ks[3]);
        if !(kh == kw && (kh == 1 || kh == 3)) {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                detail: format!("kernel spatial extent must be 1x1 or 3x3, got {}x{}", kh, kw),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArg { op: "conv2d", detail: "stride < 1".into() });
        }
        if let Some(bv) = b {
            if bv.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?} want [{}]", bv.shape(), co),
                });
            }
        }
        let pad = padding.amount(kh);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {}x{} smaller than kernel", h, w),
            });
        }
        let oh = kernels::conv_out_dim(h, pad, kh, stride);
        let ow = kernels::conv_out_dim(w, pad, kw, stride);
        bytes::register(0)?; // cheap budget probe before the big allocation below
        let data = kernels::conv_fw(
            x.value().data(),
            k.value().data(),
            b.map(|v| v.value().data()),
            bn,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            stride,
            pad,
        );
        let value = Tensor::from_vec(&[bn, oh, ow, co], data)?;
        ensure_finite("conv2d", &value)?;
        let mut inputs: Vec<&Var<E>> = vec![x, k];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        let tracked = self.any_tracked(&inputs);
        let op = Op::Conv {
            x: node_of(x),
            k: node_of(k),
            b: b.map(node_of),
            xv: x.value().clone(),
            kv: k.value().clone(),
            stride,
            pad,
        };
        Ok(self.out(op, value, tracked))
    }

    /// Transposed convolution: the exact linear adjoint of [`Tape::conv2d`]
    /// with the same kernel tensor. Input [B,h,w,Co] with kernel
    /// [Kh,Kw,Ci,Co] yields [B,h*stride,w*stride,Ci] (stride 1 keeps dims).
    pub fn conv_transpose2d(
        &mut self,
        x: &Var<E>,
        k: &Var<E>,
        b: Option<&Var<E>>,
        stride: usize,
    ) -> Result<Var<E>> {
        let (bn, h, w, cf) = x.value().dims4();
        let ks = k.shape();
        if ks.len() != 4 || ks[3] != cf {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("x {:?} kernel {:?}", x.shape(), ks),
            });
        }
        let (kh, kw, ci) = (ks[0], ks[1], ks[2]);
        if !(kh == kw && (kh == 1 || kh == 3)) {
            return Err(TensorError::InvalidArg {
                op: "conv_transpose2d",
                detail: format!("kernel spatial extent must be 1x1 or 3x3, got {}x{}", kh, kw),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::InvalidArg {
                op: "conv_transpose2d",
                detail: format!("stride must be 1 or 2, got {}", stride),
            });
        }
        if let Some(bv) = b {
            if bv.shape() != [ci] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    detail: format!("bias {:?} want [{}]", bv.shape(), ci),
                });
            }
        }
        let pad = PaddingMode::Zero.amount(kh);
        let (oh, ow) = (h * stride, w * stride);
        if kernels::conv_out_dim(oh, pad, kh, stride) != h {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input {}x{} not reachable from {}x{}", h, w, oh, ow),
            });
        }
        bytes::register(0)?;
        let mut data = kernels::conv_bw_input(
            x.value().data(),
            k.value().data(),
            bn,
            oh,
            ow,
            ci,
            kh,
            kw,
            cf,
            stride,
            pad,
        );
        if let Some(bv) = b {
            let bd = bv.value().data();
            for r in 0..bn * oh * ow {
                for (o, &v) in data[r * ci..(r + 1) * ci].iter_mut().zip(bd) {
                    *o = *o + v;
                }
            }
        }
        let value = Tensor::from_vec(&[bn, oh, ow, ci], data)?;
        ensure_finite("conv_transpose2d", &value)?;
        let mut inputs: Vec<&Var<E>> = vec![x, k];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        let tracked = self.any_tracked(&inputs);
        let op = Op::ConvT {
            x: node_of(x),
            k: node_of(k),
            b: b.map(node_of),
            xv: x.value().clone(),
            kv: k.value().clone(),
            stride,
            pad,
        };
        Ok(self.out(op, value, tracked))
    }

    // ── Normalization ───────────────────────────────────────────

    /// Layer norm over the last axis with affine scale/shift.
    pub fn layer_norm(&mut self, x: &Var<E>, gamma: &Var<E>, beta: &Var<E>, eps: E) -> Result<Var<E>> {
        let s = x.shape();
        let c = s[s.len() - 1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("affine {:?}/{:?} want [{}]", gamma.shape(), beta.shape(), c),
            });
        }
        let n: usize = s[..s.len() - 1].iter().product();
        let (xhat, stats) = kernels::layernorm_fw(x.value().data(), n, c, eps);
        let g = gamma.value().data();
        let bt = beta.value().data();
        let mut data = vec![E::ZERO; n * c];
        for r in 0..n {
            for ci in 0..c {
                data[r * c + ci] = g[ci] * xhat[r * c + ci] + bt[ci];
            }
        }
        let xhat_t = Tensor::from_vec(s, xhat)?;
        let inv_std_t = Tensor::from_vec(&[n], stats.inv_std)?;
        let value = Tensor::from_vec(s, data)?;
        ensure_finite("layer_norm", &value)?;
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x: node_of(x),
            g: node_of(gamma),
            bt: node_of(beta),
            xhat: xhat_t,
            inv_std: inv_std_t,
            gv: gamma.value().clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    /// Batch norm over all leading axes (one statistic per channel), using
    /// the batch statistics. Returns the batch mean/variance so the caller
    /// can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<E>,
        gamma: &Var<E>,
        beta: &Var<E>,
        eps: E,
    ) -> Result<(Var<E>, Vec<E>, Vec<E>)> {
        let s = x.shape();
        let c = s[s.len() - 1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("affine {:?}/{:?} want [{}]", gamma.shape(), beta.shape(), c),
            });
        }
        let n: usize = s[..s.len() - 1].iter().product();
        let (xhat, stats) = kernels::batchnorm_fw(x.value().data(), n, c, eps);
        let g = gamma.value().data();
        let bt = beta.value().data();
        let mut data = vec![E::ZERO; n * c];
        for r in 0..n {
            for ci in 0..c {
                data[r * c + ci] = g[ci] * xhat[r * c + ci] + bt[ci];
            }
        }
        // Biased batch variance, recovered from inv_std.
        let var: Vec<E> = stats
            .inv_std
            .iter()
            .map(|&is| E::ONE / (is * is) - eps)
            .collect();
        let xhat_t = Tensor::from_vec(s, xhat)?;
        let inv_std_t = Tensor::from_vec(&[c], stats.inv_std)?;
        let value = Tensor::from_vec(s, data)?;
        ensure_finite("batch_norm", &value)?;
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let op = Op::BatchNormTrain {
            x: node_of(x),
            g: node_of(gamma),
            bt: node_of(beta),
            xhat: xhat_t,
            inv_std: inv_std_t,
            gv: gamma.value().clone(),
        };
        Ok((self.out(op, value, tracked), stats.mean, var))
    }

    /// Batch norm applying stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Var<E>,
        gamma: &Var<E>,
        beta: &Var<E>,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<Var<E>> {
        let s = x.shape();
        let c = s[s.len() - 1];
        if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                detail: format!("channel mismatch for {:?}", s),
            });
        }
        let n: usize = s[..s.len() - 1].iter().product();
        let inv: Vec<E> = running_var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let g = gamma.value().data();
        let bt = beta.value().data();
        let xd = x.value().data();
        let mut xhat = vec![E::ZERO; n * c];
        let mut data = vec![E::ZERO; n * c];
        for r in 0..n {
            for ci in 0..c {
                let xh = (xd[r * c + ci] - running_mean[ci]) * inv[ci];
                xhat[r * c + ci] = xh;
                data[r * c + ci] = g[ci] * xh + bt[ci];
            }
        }
        // Per-channel dx scale: gamma * inv_std.
        let scale: Vec<E> = g.iter().zip(&inv).map(|(&gv, &iv)| gv * iv).collect();
        let xhat_t = Tensor::from_vec(s, xhat)?;
        let scale_t = Tensor::from_vec(&[c], scale)?;
        let value = Tensor::from_vec(s, data)?;
        ensure_finite("batch_norm_eval", &value)?;
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let op = Op::BatchNormEval {
            x: node_of(x),
            g: node_of(gamma),
            bt: node_of(beta),
            xhat: xhat_t,
            scale: scale_t,
        };
        Ok(self.out(op, value, tracked))
    }

    // ── Activations ─────────────────────────────────────────────

    pub fn swish(&mut self, x: &Var<E>) -> Result<Var<E>> {
        let value = x.value().map(|v| v * super::sigmoid_scalar(v))?;
        ensure_finite("swish", &value)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Swish { x: node_of(x), xv: x.value().clone() }, value, tracked))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: &Var<E>) -> Result<Var<E>> {
        let value = x.value().map(gelu_scalar)?;
        ensure_finite("gelu", &value)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Gelu { x: node_of(x), xv: x.value().clone() }, value, tracked))
    }

    pub fn sigmoid(&mut self, x: &Var<E>) -> Result<Var<E>> {
        let value = x.value().map(super::sigmoid_scalar)?;
        ensure_finite("sigmoid", &value)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Sigmoid { x: node_of(x), out: value.clone() }, value, tracked))
    }

    pub fn relu(&mut self, x: &Var<E>) -> Result<Var<E>> {
        let value = x.value().map(|v| v.max_val(E::ZERO))?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Relu { x: node_of(x), xv: x.value().clone() }, value, tracked))
    }

    // ── Attention / stochastic / CA-specific ────────────────────

    /// Localized multi-head self-attention: each cell's query attends to the
    /// keys/values of its 3x3 Moore neighborhood; out-of-lattice neighbors
    /// are excluded from the softmax.
    pub fn local_attention(&mut self, q: &Var<E>, k: &Var<E>, v: &Var<E>, heads: usize) -> Result<Var<E>> {
        same_shape("local_attention", q, k)?;
        same_shape("local_attention", q, v)?;
        let (b, h, w, c) = q.value().dims4();
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "local_attention",
                detail: format!("embedding dim {} not divisible by heads {}", c, heads),
            });
        }
        let dh = c / heads;
        let (out, probs) = kernels::local_attention_fw(
            q.value().data(),
            k.value().data(),
            v.value().data(),
            b,
            h,
            w,
            heads,
            dh,
        );
        let probs_t = Tensor::from_vec(&[b, h, w, heads, 9], probs)?;
        let value = Tensor::from_vec(&[b, h, w, c], out)?;
        ensure_finite("local_attention", &value)?;
        let tracked = self.any_tracked(&[q, k, v]);
        let op = Op::LocalAttention {
            q: node_of(q),
            k: node_of(k),
            v: node_of(v),
            qv: q.value().clone(),
            kv: k.value().clone(),
            vv: v.value().clone(),
            probs: probs_t,
            heads,
        };
        Ok(self.out(op, value, tracked))
    }

    /// Inverted dropout with the given keep probability; the mask must hold
    /// 0 or 1/keep entries (see [`dropout_mask`]).
    pub fn dropout(&mut self, x: &Var<E>, mask: &Tensor<E>) -> Result<Var<E>> {
        if x.shape() != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                detail: format!("{:?} vs {:?}", x.shape(), mask.shape()),
            });
        }
        let value = zip_new(x.value(), mask, |a, m| a * m)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.out(Op::Dropout { x: node_of(x), mask: mask.clone() }, value, tracked))
    }

    /// Multiplies x [..., C] by a per-cell map [..., 1], broadcasting over
    /// the channel axis. Gradients flow to both operands.
    pub fn mul_cell_map(&mut self, x: &Var<E>, map: &Var<E>) -> Result<Var<E>> {
        let xs = x.shape();
        let ms = map.shape();
        if ms[ms.len() - 1] != 1 || ms[..ms.len() - 1] != xs[..xs.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_cell_map",
                detail: format!("x {:?} map {:?}", xs, ms),
            });
        }
        let c = xs[xs.len() - 1];
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let xd = x.value().data();
        let md = map.value().data();
        let mut data = vec![E::ZERO; rows * c];
        for r in 0..rows {
            let m = md[r];
            for ci in 0..c {
                data[r * c + ci] = xd[r * c + ci] * m;
            }
        }
        let value = Tensor::from_vec(xs, data)?;
        ensure_finite("mul_cell_map", &value)?;
        let tracked = self.any_tracked(&[x, map]);
        let op = Op::MulCellMap {
            x: node_of(x),
            map: node_of(map),
            xv: x.value().clone(),
            mapv: map.value().clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    /// Asynchronous CA update: cells where mask is nonzero receive
    /// state + delta; masked-out cells are copied bit-exactly.
    pub fn masked_residual(&mut self, state: &Var<E>, delta: &Var<E>, mask: &Tensor<E>) -> Result<Var<E>> {
        same_shape("masked_residual", state, delta)?;
        let ss = state.shape();
        if mask.shape()[..mask.shape().len() - 1] != ss[..ss.len() - 1]
            || *mask.shape().last().unwrap() != 1
        {
            return Err(TensorError::ShapeMismatch {
                op: "masked_residual",
                detail: format!("state {:?} mask {:?}", ss, mask.shape()),
            });
        }
        let c = ss[ss.len() - 1];
        let rows: usize = ss[..ss.len() - 1].iter().product();
        let sd = state.value().data();
        let dd = delta.value().data();
        let md = mask.data();
        let mut data = vec![E::ZERO; rows * c];
        for r in 0..rows {
            let row = &mut data[r * c..(r + 1) * c];
            if md[r] != E::ZERO {
                for (o, (&s, &d)) in row.iter_mut().zip(sd[r * c..].iter().zip(&dd[r * c..])) {
                    *o = s + d;
                }
            } else {
                row.copy_from_slice(&sd[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::from_vec(ss, data)?;
        ensure_finite("masked_residual", &value)?;
        let tracked = self.any_tracked(&[state, delta]);
        let op = Op::MaskedResidual {
            state: node_of(state),
            delta: node_of(delta),
            mask: mask.clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    // ── Scalar losses ───────────────────────────────────────────

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("mse", a, b)?;
        let n = E::from_f64(a.value().numel() as f64);
        let mut acc = E::ZERO;
        for (&x, &y) in a.value().data().iter().zip(b.value().data()) {
            let d = x - y;
            acc = acc + d * d;
        }
        let value = Tensor::scalar_tensor(acc / n)?;
        ensure_finite("mse", &value)?;
        let tracked = self.any_tracked(&[a, b]);
        let op = Op::Mse {
            a: node_of(a),
            b: node_of(b),
            av: a.value().clone(),
            bv: b.value().clone(),
        };
        Ok(self.out(op, value, tracked))
    }

    /// Mean L1 distance between x and its [lo, hi]-clipped copy; zero for
    /// tensors already inside the range.
    pub fn l1_clip_norm(&mut self, x: &Var<E>, lo: E, hi: E) -> Result<Var<E>> {
        if lo > hi {
            return Err(TensorError::InvalidArg {
                op: "l1_clip_norm",
                detail: "lo > hi".into(),
            });
        }
        let n = E::from_f64(x.value().numel() as f64);
        let mut acc = E::ZERO;
        for &v in x.value().data() {
            let clipped = v.max_val(lo).min_val(hi);
            acc = acc + (v - clipped).abs();
        }
        let value = Tensor::scalar_tensor(acc / n)?;
        let tracked = self.any_tracked(&[x]);
        let op = Op::L1Clip { x: node_of(x), xv: x.value().clone(), lo, hi };
        Ok(self.out(op, value, tracked))
    }

    /// Convenience: sum of weighted scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(E, &Var<E>)]) -> Result<Var<E>> {
        let mut total: Option<Var<E>> = None;
        for (wgt, term) in terms {
            let scaled = self.scale(term, *wgt)?;
            total = Some(match total {
                Some(t) => self.add(&t, &scaled)?,
                None => scaled,
            });
        }
        total.ok_or_else(|| TensorError::InvalidArg {
            op: "weighted_sum",
            detail: "no terms".into(),
        })
    }

    // ── Backward ────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the recorded graph: records
    /// are dropped as soon as their gradients have been propagated, and the
    /// tape cannot be replayed a second time.
    pub fn backward(&mut self, loss: &Var<E>) -> Result<Grads<E>> {
        let loss_node = loss.node.ok_or_else(|| TensorError::InvalidArg {
            op: "backward",
            detail: "loss is not tracked on this tape".into(),
        })?;
        assert_eq!(loss.value.numel(), 1, "backward target must be scalar");

        let n = self.records.len();
        let mut grads: Vec<Option<GradBuf<E>>> = (0..n).map(|_| None).collect();
        grads[loss_node] = Some(GradBuf::from_vec(vec![E::ONE])?);

        let mut out = Grads {
            params: HashMap::new(),
            retained: HashMap::new(),
        };

        for i in (0..n).rev() {
            let Some(gbuf) = grads[i].take() else {
                // Nothing flowed here; still drop the record to release saved tensors.
                self.records[i].op = Op::Leaf;
                continue;
            };
            let dy = &gbuf.v;
            let record = std::mem::replace(&mut self.records[i].op, Op::Leaf);
            match &record {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy)?;
                    accumulate(&mut grads, *b, dy)?;
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, dy)?;
                    accumulate_with(&mut grads, *b, dy.len(), |buf| {
                        for (o, &d) in buf.iter_mut().zip(dy) {
                            *o = *o - d;
                        }
                    })?;
                }
                Op::Hadamard { a, b, av, bv } => {
                    accumulate_with(&mut grads, *a, dy.len(), |buf| {
                        for ((o, &d), &bvv) in buf.iter_mut().zip(dy).zip(bv.data()) {
                            *o = *o + d * bvv;
                        }
                    })?;
                    accumulate_with(&mut grads, *b, dy.len(), |buf| {
                        for ((o, &d), &avv) in buf.iter_mut().zip(dy).zip(av.data()) {
                            *o = *o + d * avv;
                        }
                    })?;
                }
                Op::Scale { x, k } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for (o, &d) in buf.iter_mut().zip(dy) {
                            *o = *o + d * *k;
                        }
                    })?;
                }
                Op::AddScalar { x } => accumulate(&mut grads, *x, dy)?,
                Op::Reshape { x } => accumulate(&mut grads, *x, dy)?,
                Op::ConcatLast { parts } => {
                    let c_total: usize = parts.iter().map(|(_, c)| c).sum();
                    let rows = dy.len() / c_total;
                    let mut offset = 0;
                    for (node, c) in parts {
                        accumulate_with(&mut grads, *node, rows * c, |buf| {
                            for r in 0..rows {
                                for ci in 0..*c {
                                    buf[r * c + ci] = buf[r * c + ci] + dy[r * c_total + offset + ci];
                                }
                            }
                        })?;
                        offset += c;
                    }
                }
                Op::SliceLast { x, from, c_in } => {
                    let c = dy.len() / (dy.len() / self.records[i].shape.last().unwrap())
                        .max(1);
                    let _ = c;
                    let c_out = *self.records[i].shape.last().unwrap();
                    let rows = dy.len() / c_out;
                    accumulate_with(&mut grads, *x, rows * c_in, |buf| {
                        for r in 0..rows {
                            for ci in 0..c_out {
                                buf[r * c_in + from + ci] = buf[r * c_in + from + ci] + dy[r * c_out + ci];
                            }
                        }
                    })?;
                }
                Op::Linear { x, w, b, xv, wv } => {
                    let (ci, co) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.numel() / ci;
                    let dx = kernels::matmul_nt(dy, wv.data(), rows, co, ci);
                    accumulate(&mut grads, *x, &dx)?;
                    drop(dx);
                    let dw = kernels::matmul_tn(xv.data(), dy, rows, ci, co);
                    accumulate(&mut grads, *w, &dw)?;
                    drop(dw);
                    if let Some(b) = b {
                        let db = kernels::sum_over_rows(dy, rows, co);
                        accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::Conv { x, k, b, xv, kv, stride, pad } => {
                    let (bn, h, w, ci) = xv.dims4();
                    let ks = kv.shape();
                    let (kh, kw, co) = (ks[0], ks[1], ks[3]);
                    let dx = kernels::conv_bw_input(dy, kv.data(), bn, h, w, ci, kh, kw, co, *stride, *pad);
                    accumulate(&mut grads, *x, &dx)?;
                    drop(dx);
                    let dk = kernels::conv_bw_kernel(xv.data(), dy, bn, h, w, ci, kh, kw, co, *stride, *pad);
                    accumulate(&mut grads, *k, &dk)?;
                    drop(dk);
                    if let Some(b) = b {
                        let db = kernels::sum_over_rows(dy, dy.len() / co, co);
                        accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::ConvT { x, k, b, xv, kv, stride, pad } => {
                    let (bn, h, w, cf) = xv.dims4();
                    let ks = kv.shape();
                    let (kh, kw, ci) = (ks[0], ks[1], ks[2]);
                    let (oh, ow) = (h * stride, w * stride);
                    // d_input of the transpose is a plain convolution of dy.
                    let dx = kernels::conv_fw(dy, kv.data(), None, bn, oh, ow, ci, kh, kw, cf, *stride, *pad);
                    accumulate(&mut grads, *x, &dx)?;
                    drop(dx);
                    let dk = kernels::conv_bw_kernel(dy, xv.data(), bn, oh, ow, ci, kh, kw, cf, *stride, *pad);
                    accumulate(&mut grads, *k, &dk)?;
                    drop(dk);
                    if let Some(b) = b {
                        let db = kernels::sum_over_rows(dy, dy.len() / ci, ci);
                        accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::LayerNorm { x, g, bt, xhat, inv_std, gv } => {
                    let c = *xhat.shape().last().unwrap();
                    let n = xhat.numel() / c;
                    let gd = gv.data();
                    let xh = xhat.data();
                    let mut d_xhat = vec![E::ZERO; n * c];
                    let mut dg = vec![E::ZERO; c];
                    let mut db = vec![E::ZERO; c];
                    for r in 0..n {
                        for ci in 0..c {
                            let d = dy[r * c + ci];
                            d_xhat[r * c + ci] = d * gd[ci];
                            dg[ci] = dg[ci] + d * xh[r * c + ci];
                            db[ci] = db[ci] + d;
                        }
                    }
                    let dx = kernels::layernorm_bw_input(&d_xhat, xh, inv_std.data(), n, c);
                    accumulate(&mut grads, *x, &dx)?;
                    accumulate(&mut grads, *g, &dg)?;
                    accumulate(&mut grads, *bt, &db)?;
                }
                Op::BatchNormTrain { x, g, bt, xhat, inv_std, gv } => {
                    let c = *xhat.shape().last().unwrap();
                    let n = xhat.numel() / c;
                    let gd = gv.data();
                    let xh = xhat.data();
                    let mut d_xhat = vec![E::ZERO; n * c];
                    let mut dg = vec![E::ZERO; c];
                    let mut db = vec![E::ZERO; c];
                    for r in 0..n {
                        for ci in 0..c {
                            let d = dy[r * c + ci];
                            d_xhat[r * c + ci] = d * gd[ci];
                            dg[ci] = dg[ci] + d * xh[r * c + ci];
                            db[ci] = db[ci] + d;
                        }
                    }
                    let dx = kernels::batchnorm_bw_input(&d_xhat, xh, inv_std.data(), n, c);
                    accumulate(&mut grads, *x, &dx)?;
                    accumulate(&mut grads, *g, &dg)?;
                    accumulate(&mut grads, *bt, &db)?;
                }
                Op::BatchNormEval { x, g, bt, xhat, scale } => {
                    let c = *xhat.shape().last().unwrap();
                    let n = xhat.numel() / c;
                    let sc = scale.data();
                    let xh = xhat.data();
                    let mut dg = vec![E::ZERO; c];
                    let mut db = vec![E::ZERO; c];
                    accumulate_with(&mut grads, *x, n * c, |buf| {
                        for r in 0..n {
                            for ci in 0..c {
                                buf[r * c + ci] = buf[r * c + ci] + dy[r * c + ci] * sc[ci];
                            }
                        }
                    })?;
                    for r in 0..n {
                        for ci in 0..c {
                            let d = dy[r * c + ci];
                            dg[ci] = dg[ci] + d * xh[r * c + ci];
                            db[ci] = db[ci] + d;
                        }
                    }
                    accumulate(&mut grads, *g, &dg)?;
                    accumulate(&mut grads, *bt, &db)?;
                }
                Op::Swish { x, xv } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for ((o, &d), &v) in buf.iter_mut().zip(dy).zip(xv.data()) {
                            let s = super::sigmoid_scalar(v);
                            *o = *o + d * (s + v * s * (E::ONE - s));
                        }
                    })?;
                }
                Op::Gelu { x, xv } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for ((o, &d), &v) in buf.iter_mut().zip(dy).zip(xv.data()) {
                            *o = *o + d * gelu_grad_scalar(v);
                        }
                    })?;
                }
                Op::Sigmoid { x, out } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for ((o, &d), &s) in buf.iter_mut().zip(dy).zip(out.data()) {
                            *o = *o + d * s * (E::ONE - s);
                        }
                    })?;
                }
                Op::Relu { x, xv } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for ((o, &d), &v) in buf.iter_mut().zip(dy).zip(xv.data()) {
                            if v > E::ZERO {
                                *o = *o + d;
                            }
                        }
                    })?;
                }
                Op::LocalAttention { q, k, v, qv, kv, vv, probs, heads } => {
                    let (b, h, w, c) = qv.dims4();
                    let dh = c / heads;
                    let (dq, dk, dv) = kernels::local_attention_bw(
                        dy,
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs.data(),
                        b,
                        h,
                        w,
                        *heads,
                        dh,
                    );
                    accumulate(&mut grads, *q, &dq)?;
                    drop(dq);
                    accumulate(&mut grads, *k, &dk)?;
                    drop(dk);
                    accumulate(&mut grads, *v, &dv)?;
                }
                Op::Dropout { x, mask } => {
                    accumulate_with(&mut grads, *x, dy.len(), |buf| {
                        for ((o, &d), &m) in buf.iter_mut().zip(dy).zip(mask.data()) {
                            *o = *o + d * m;
                        }
                    })?;
                }
                Op::MulCellMap { x, map, xv, mapv } => {
                    let c = *xv.shape().last().unwrap();
                    let rows = xv.numel() / c;
                    let md = mapv.data();
                    accumulate_with(&mut grads, *x, rows * c, |buf| {
                        for r in 0..rows {
                            for ci in 0..c {
                                buf[r * c + ci] = buf[r * c + ci] + dy[r * c + ci] * md[r];
                            }
                        }
                    })?;
                    let xd = xv.data();
                    accumulate_with(&mut grads, *map, rows, |buf| {
                        for r in 0..rows {
                            let mut acc = E::ZERO;
                            for ci in 0..c {
                                acc = acc + dy[r * c + ci] * xd[r * c + ci];
                            }
                            buf[r] = buf[r] + acc;
                        }
                    })?;
                }
                Op::MaskedResidual { state, delta, mask } => {
                    accumulate(&mut grads, *state, dy)?;
                    let rows = mask.numel();
                    let c = dy.len() / rows;
                    let md = mask.data();
                    accumulate_with(&mut grads, *delta, dy.len(), |buf| {
                        for r in 0..rows {
                            if md[r] != E::ZERO {
                                for ci in 0..c {
                                    buf[r * c + ci] = buf[r * c + ci] + dy[r * c + ci];
                                }
                            }
                        }
                    })?;
                }
                Op::Mse { a, b, av, bv } => {
                    let d = dy[0];
                    let n = E::from_f64(av.numel() as f64);
                    let two = E::from_f64(2.0);
                    accumulate_with(&mut grads, *a, av.numel(), |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(av.data()).zip(bv.data()) {
                            *o = *o + d * two * (x - y) / n;
                        }
                    })?;
                    accumulate_with(&mut grads, *b, av.numel(), |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(av.data()).zip(bv.data()) {
                            *o = *o - d * two * (x - y) / n;
                        }
                    })?;
                }
                Op::L1Clip { x, xv, lo, hi } => {
                    let d = dy[0];
                    let n = E::from_f64(xv.numel() as f64);
                    accumulate_with(&mut grads, *x, xv.numel(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(xv.data()) {
                            if v > *hi {
                                *o = *o + d / n;
                            } else if v < *lo {
                                *o = *o - d / n;
                            }
                        }
                    })?;
                }
            }
            drop(record);

            let rec = &self.records[i];
            if rec.param.is_some() || rec.retain {
                let tensor = gbuf.into_tensor(&rec.shape)?;
                if let Some(pid) = rec.param {
                    out.params.insert(pid, tensor.clone());
                }
                if rec.retain {
                    out.retained.insert(i, tensor);
                }
            }
        }
        Ok(out)
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

// Sentinel for untracked inputs: their gradients are computed but discarded
// into a node that no record ever reads.
fn node_of<E: Element>(v: &Var<E>) -> usize {
    v.node.unwrap_or(usize::MAX)
}

fn accumulate<E: Element>(
    grads: &mut [Option<GradBuf<E>>],
    node: usize,
    delta: &[E],
) -> Result<()> {
    if node == usize::MAX {
        return Ok(());
    }
    match &mut grads[node] {
        Some(buf) => buf.add_assign(delta),
        slot @ None => {
            let mut buf = GradBuf::zeros(delta.len())?;
            buf.add_assign(delta);
            *slot = Some(buf);
        }
    }
    Ok(())
}

fn accumulate_with<E: Element>(
    grads: &mut [Option<GradBuf<E>>],
    node: usize,
    len: usize,
    f: impl FnOnce(&mut [E]),
) -> Result<()> {
    if node == usize::MAX {
        return Ok(());
    }
    if grads[node].is_none() {
        grads[node] = Some(GradBuf::zeros(len)?);
    }
    f(&mut grads[node].as_mut().unwrap().v);
    Ok(())
}

fn same_shape<E: Element>(op: &'static str, a: &Var<E>, b: &Var<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn zip_new<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn gelu_scalar<E: Element>(x: E) -> E {
    let a = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let a = E::from_f64(0.797_884_560_802_865_4);
    let b = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * a * (E::ONE + three * b * x * x)
}

/// Builds an inverted-dropout mask: entries are 1/keep with probability
/// `keep`, zero otherwise.
pub fn dropout_mask<E: Element>(
    shape: &[usize],
    keep: f64,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<E>> {
    assert!(keep > 0.0 && keep <= 1.0, "keep probability in (0,1]");
    let inv = E::from_f64(1.0 / keep);
    Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            inv
        } else {
            E::ZERO
        }
    })
}

/// Per-cell Bernoulli(p) update mask of shape [b, h, w, 1].
pub fn bernoulli_cell_mask<E: Element>(
    b: usize,
    h: usize,
    w: usize,
    p: f64,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<E>> {
    Tensor::from_fn(&[b, h, w, 1], |_| {
        if rng.random::<f64>() < p {
            E::ONE
        } else {
            E::ZERO
        }
    })
}
