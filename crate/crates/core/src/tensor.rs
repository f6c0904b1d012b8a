//! Dense row-major f64 tensors. A `Tensor` is a cheap handle (`Rc`) onto
//! shared storage; gradients accumulate into the handle so parameters can be
//! updated in place between training steps.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::{gaussian, Rng};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![value; numel], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[1])
    }

    /// Gaussian-initialized trainable parameter.
    pub fn randn_param(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| gaussian(rng) * std).collect();
        let t = Tensor::new(data, shape);
        t.set_requires_grad(true);
        t
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let t = Tensor::zeros(shape);
        t.set_requires_grad(true);
        t
    }

    pub fn full_param(shape: &[usize], value: f64) -> Tensor {
        let t = Tensor::full(shape, value);
        t.set_requires_grad(true);
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn at(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    /// Accumulated gradient, or zeros if backward never reached this tensor.
    pub fn grad_vec(&self) -> Vec<f64> {
        match self.inner.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => vec![0.0; self.numel()],
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf with a copy of the data and no grad tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), self.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_checked() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![1.0, 2.0], &[3]);
    }

    #[test]
    fn grad_defaults_to_zeros() {
        let t = Tensor::zeros_param(&[4]);
        assert_eq!(t.grad_vec(), vec![0.0; 4]);
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad_vec(), vec![2.0, 3.0, 4.0, 5.0]);
        t.zero_grad();
        assert_eq!(t.grad_vec(), vec![0.0; 4]);
    }
}
