//! Dense tensor values, reverse-mode differentiation and the neural ops the
//! codec and priors are built from.
//!
//! Axis convention, fixed once for the whole crate: rank-4 activations are
//! `(time, height, width, channel)` row-major, and rank-5 convolution weights
//! are `(out_channel, kt, kh, kw, in_channel)`. Kernel triples quoted as
//! "t w h" in config tables map onto `(t, h, w)` here; every config in this
//! crate has square spatial kernels so the h/w order never changes a value.

mod adam;
mod conv;
mod io;
mod tape;

pub use adam::{adam_step, AdamParams, AdamState};
pub use conv::{CausalMask, ConvSpec, MaskKind, Padding};
pub use io::{read_tensor, write_tensor, Dtype};
pub use tape::{gated_block, multi_head_attention, AttentionWeights, Op, Tape, Var};

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("channel count {channels} is not divisible by {heads} heads")]
    HeadSplit { channels: usize, heads: usize },
    #[error("mask kernel {mask:?} does not match conv kernel {kernel:?}")]
    MaskShape { mask: [usize; 3], kernel: [usize; 3] },
    #[error("invalid convolution: {0}")]
    BadConv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad tensor file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor: `f32` for training, `f64` for oracle checks.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array. Values are immutable once an op has produced
/// them; `grad` is filled in by [`Tape::backward`] write-back helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} scalars, got {}", shape, expect, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::set_grad",
                detail: format!("grad length {} vs data length {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar extraction; errors on anything but a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::item",
                detail: format!("expected a scalar, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Converts every element through `f64`. Exact when widening.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Worker-thread budget: `LTC_THREADS` caps the pool; 1 disables it.
/// Results are bit-identical for any thread count because every output
/// element is accumulated by exactly one task in a fixed order.
pub(crate) fn worker_pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let threads = std::env::var("LTC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        if threads <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()
        }
    })
    .as_ref()
}
