//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation and cheap to clone (the buffer is
//! shared behind an `Arc`). Primitives in [`ops`] record a graph node on
//! their output whenever an input requires gradients; [`backward`] walks
//! that graph in reverse topological order. Optimizer updates never mutate
//! a buffer in place — they swap in a freshly built parameter tensor.

mod autodiff;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod scalar;

pub use autodiff::{backward, GradMap};
pub use scalar::Scalar;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: ops::Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

struct Inner<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Dense n-dimensional array in row-major order, optionally carrying the
/// graph node that produced it.
pub struct Tensor<T: Scalar = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::build(shape, data, false, None)
    }

    /// Leaf tensor participating in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::build(shape, data, true, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::ZERO; len])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub(crate) fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Same buffer, new identity, with the given grad flag. Used to freeze
    /// or thaw parameters without copying.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad,
                node: None,
            }),
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.inner.data[0]
    }

    /// Rows × cols view of a 2-D tensor's extents.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Dimension(format!(
                "expected 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    /// Clone of the underlying buffer converted to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_matches_buffer() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(!t.requires_grad());
        assert!(t.is_leaf());
    }

    #[test]
    fn param_roundtrip_flag() {
        let p = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]);
        assert!(p.requires_grad());
        let frozen = p.with_requires_grad(false);
        assert!(!frozen.requires_grad());
        assert_eq!(frozen.data(), p.data());
        assert_ne!(frozen.id(), p.id());
    }
}
