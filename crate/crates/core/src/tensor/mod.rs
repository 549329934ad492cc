//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable dense n-dimensional array in row-major
//! order. Differentiable computation runs through a [`Tape`]: every op
//! records itself, and [`Tape::backward`] walks the record in exact
//! reverse order, depositing gradients into the grad slot of every
//! `requires_grad` leaf.
//!
//! There is no implicit broadcasting anywhere; ops that need a
//! broadcast-like shape rule (row bias add, channel/spatial gating)
//! exist as dedicated, explicitly named operations.

mod tape;
mod volumetric;

pub use tape::{ActivationKind, ElementwiseKind, PoolKind, ReduceKind, Tape};

use std::fmt;
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`;
/// gradient-check tolerances are defined in 64-bit only.
pub trait Element:
    Float + FromPrimitive + NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` literal into the element type.
pub fn elem<T: Element>(v: f64) -> T {
    T::from_f64(v).expect("f64 value representable in element type")
}

type GradSlot<T> = Arc<Mutex<Option<Vec<T>>>>;

/// Immutable dense array with optional gradient tracking.
///
/// Cloning is cheap: the value buffer is shared. A tensor created with
/// [`Tensor::with_grad`] owns a gradient slot that is shared by all its
/// clones, so a parameter stored in a layer receives the gradient
/// computed for the clone recorded on a tape.
#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: Option<GradSlot<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from row-major data. Rejects shape/length
    /// disagreement, zero extents, and non-finite values.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("from_vec", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} holds {numel} values, data has {}", data.len()),
            ));
        }
        ensure_finite(&data, "from_vec")?;
        Ok(Self::new_unchecked(shape, data))
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor { shape, data: Arc::new(data), grad: None }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_unchecked(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_unchecked(shape, vec![value; numel])
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(Vec::new(), vec![value])
    }

    /// Marks this tensor as a trainable leaf: backward will populate its
    /// gradient slot.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(Arc::new(Mutex::new(None)));
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.as_ref().and_then(|s| s.lock().expect("grad slot lock").clone())
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.grad.as_ref().and_then(|s| s.lock().expect("grad slot lock").take())
    }

    pub fn clear_grad(&self) {
        if let Some(s) = &self.grad {
            *s.lock().expect("grad slot lock") = None;
        }
    }

    pub(crate) fn has_pending_grad(&self) -> bool {
        self.grad
            .as_ref()
            .map(|s| s.lock().expect("grad slot lock").is_some())
            .unwrap_or(false)
    }

    pub(crate) fn accumulate_grad(&self, add: &[T]) {
        if let Some(s) = &self.grad {
            let mut slot = s.lock().expect("grad slot lock");
            match slot.as_mut() {
                Some(g) => {
                    for (gi, ai) in g.iter_mut().zip(add) {
                        *gi += *ai;
                    }
                }
                None => *slot = Some(add.to_vec()),
            }
        }
    }

    /// Replaces the value buffer in place, keeping shape and grad slot.
    /// Used by the optimizer; recorded tapes keep the old buffer alive.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        ensure_finite(&data, "set_data")?;
        self.data = Arc::new(data);
        Ok(())
    }

    /// Identity of the value buffer; two tensors sharing a buffer are
    /// the same tape leaf.
    pub(crate) fn buffer_key(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Elementwise cast into another element type (used by checkpoint IO
    /// and by tests that compare 32-bit and 64-bit paths).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect();
        let t = Tensor::new_unchecked(self.shape.clone(), data);
        if self.requires_grad() {
            t.with_grad()
        } else {
            t
        }
    }
}

pub(crate) fn ensure_finite<T: Element>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}
