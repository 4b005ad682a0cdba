//! Dense tensors with reverse-mode differentiation.
//!
//! The engine covers exactly the operator set the restoration architecture
//! needs: convolutions (plus their transposed adjoints), batch/layer
//! normalization, swish/gelu/sigmoid activations, localized 3x3 self
//! attention, and a small pointwise suite. Training runs in `f32`;
//! the same code instantiates with `f64` for finite-difference checks.

pub mod bytes;
pub mod gradcheck;
mod kernels;
mod param;
mod tape;

pub use param::{checksum, he_init, Param, ParamId};
pub use tape::{bernoulli_cell_mask, dropout_mask, Grads, PaddingMode, Tape, Var};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors produced by tensor construction and operators.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error(
        "tensor byte budget exceeded: requested {requested} new bytes with {live} live (budget {budget})"
    )]
    BudgetExceeded {
        requested: usize,
        live: usize,
        budget: usize,
    },
    #[error("batch norm used in eval mode before any statistics were recorded")]
    MissingStats,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar types the engine runs on. `f32` is the training default; `f64`
/// backs the gradient-check suite.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_val(self, other: Self) -> Self;
    fn min_val(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max_val(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn min_val(self, other: Self) -> Self {
                self.min(other)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<E: Element>(z: E) -> E {
    if z >= E::ZERO {
        E::ONE / (E::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::ONE + e)
    }
}

// ── Tracked buffer ──────────────────────────────────────────────────

/// Contiguous storage participating in live-byte accounting.
struct Buf<E: Element> {
    data: Vec<E>,
}

impl<E: Element> Buf<E> {
    fn from_vec(data: Vec<E>) -> Result<Self> {
        bytes::register(std::mem::size_of_val(&data[..]))?;
        Ok(Buf { data })
    }
}

impl<E: Element> Drop for Buf<E> {
    fn drop(&mut self) {
        bytes::unregister(std::mem::size_of_val(&self.data[..]));
    }
}

// ── Tensor ──────────────────────────────────────────────────────────

/// Immutable dense n-d array. Clones share storage; all mutation happens
/// through constructors, so tensors are safe to hand across threads.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    buf: Arc<Buf<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(Buf::from_vec(data)?),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![E::ZERO; numel])
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar_tensor(value: E) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.buf.data
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.buf.data[0]
    }

    /// Same storage under a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    /// Dimensions of a rank-4 tensor laid out batch x height x width x channels.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Result<Self> {
        Self::from_vec(&self.shape, self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts element type; used when feeding `f32` image data into the
    /// `f64` gradient-check instantiation.
    pub fn cast<F: Element>(&self) -> Result<Tensor<F>> {
        Tensor::from_vec(
            &self.shape,
            self.data().iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        )
    }

    /// Fills with N(0, std) samples from the given RNG (sampled in f64 so the
    /// stream is identical across element types).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0f64, std).expect("std must be finite");
        Self::from_fn(shape, |_| E::from_f64(normal.sample(rng)))
    }

    /// Concatenates along the first (batch) axis.
    pub fn concat_batch(parts: &[&Tensor<E>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArg {
            op: "concat_batch",
            detail: "no parts".into(),
        })?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    detail: format!("{:?} vs {:?}", first.shape, p.shape),
                });
            }
            data.extend_from_slice(p.data());
            b += p.shape[0];
        }
        let mut shape = vec![b];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }

    /// Copies rows [from, to) of the first (batch) axis.
    pub fn slice_batch(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.shape[0] {
            return Err(TensorError::InvalidArg {
                op: "slice_batch",
                detail: format!("range {}..{} of {}", from, to, self.shape[0]),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = to - from;
        Tensor::from_vec(&shape, self.data()[from * stride..to * stride].to_vec())
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
