//! Dense f32 tensors with reverse-mode autodiff.
//!
//! Tensors are immutable values: the buffer behind a `Tensor` never changes
//! after construction, so clones are cheap and read-only sharing across
//! threads is safe. Differentiation happens through [`Graph`], a tape that
//! records ops during the forward pass and replays them in reverse on
//! [`Graph::backward`]. Gradients land on the originating tensors of
//! trainable leaves and are read back with [`Tensor::grad`].

mod graph;
pub(crate) mod kernels;

pub use graph::Graph;

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    id: u64,
}

/// Immutable dense f32 array.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                grad: Mutex::new(None),
                requires_grad,
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            }),
        }
    }

    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::shape(
                "tensor",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_parts(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::from_parts(vec![v; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_parts(vec![v], vec![], false)
    }

    /// Marks this value as a trainable leaf. Returns a tensor with the same
    /// contents that will receive a gradient on backward.
    pub fn trainable(&self) -> Tensor {
        Tensor::from_parts(self.data().to_vec(), self.shape().to_vec(), true)
    }

    /// Same shape and trainability, replaced contents, fresh identity and
    /// no gradient. This is how optimizer steps produce the next value of
    /// a parameter.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), self.numel());
        Tensor::from_parts(data, self.shape().to_vec(), self.requires_grad())
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected scalar, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Multiply the stored gradient in place (used by gradient clipping).
    pub(crate) fn scale_grad(&self, s: f32) {
        if let Some(acc) = self.inner.grad.lock().unwrap().as_mut() {
            for v in acc.iter_mut() {
                *v *= s;
            }
        }
    }

    pub(crate) fn accum_grad(&self, g: &[f32]) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Elementwise map into a fresh constant tensor (not recorded on any
    /// graph; use for host-side post-processing only).
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(
            self.data().iter().map(|&x| f(x)).collect(),
            self.shape().to_vec(),
            false,
        )
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|x| x.clamp(lo, hi))
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshaped",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_parts(
            self.data().to_vec(),
            shape.to_vec(),
            false,
        ))
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Numeric equality (`==` on every element; treats -0.0 == 0.0).
    pub fn exact_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(&a, &b)| a == b)
    }

    /// Bit-pattern equality of the underlying buffers.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(&a, &b)| a.to_bits() == b.to_bits())
    }

}

pub(crate) fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Sinusoidal embedding of timestep values: row r holds interleaved
/// `[sin(t_r w_0), cos(t_r w_0), sin(t_r w_1), ...]` with geometrically
/// spaced frequencies `w_i = 10000^(-i / (dim/2))`. `t = 0` embeds to
/// `[0, 1, 0, 1, ...]`.
pub fn time_embedding(ts: &[f32], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::shape(
            "time_embedding",
            format!("dim must be positive and even, got {dim}"),
        ));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let w = (10_000f64).powf(-(i as f64) / half as f64);
            let arg = t as f64 * w;
            data.push(arg.sin() as f32);
            data.push(arg.cos() as f32);
        }
    }
    Tensor::new(data, &[ts.len(), dim])
}
