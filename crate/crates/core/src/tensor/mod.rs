//! Dense f32 tensors with tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is a cheaply clonable handle to a row-major f32 buffer plus an
//! optional same-shape gradient buffer. Differentiable operations live on
//! [`Graph`]: each call computes the forward value and, when the graph is
//! recording and some input requires a gradient, appends a tape entry. The
//! backward pass replays the tape in exact reverse order.
//!
//! The op set is deliberately minimal: exactly what the encoder-decoder
//! model needs. No views, no general broadcasting beyond bias-style
//! right-aligned broadcasts and leading batch dims broadcastable from 1.

mod adam;
mod graph;
pub mod gradcheck;
mod ops;

pub use adam::Adam;
pub use graph::Graph;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

/// Shared handle to a dense row-major f32 array.
///
/// Cloning a `Tensor` clones the handle, not the buffer; graph ops and the
/// optimizer rely on this to address the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} implies {n} elements, data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    /// A trainable tensor (gradient-accumulating leaf).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Zero-mean Gaussian init with the given std.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gauss(rng) * std).collect();
        Tensor::from_vec(shape, data).expect("randn: valid shape")
    }

    /// Xavier-uniform init for a [fan_in, fan_out] projection.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor::from_vec(&[fan_in, fan_out], data).expect("xavier")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.borrow().shape[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [f32]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on tensor with {} elements", inner.data.len());
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Fresh detached copy (no grad, no tape history).
    pub fn detached_copy(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(&inner.shape, inner.data.clone()).expect("detached_copy")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len());
        match &mut inner.grad {
            Some(buf) => {
                for (b, &gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_grad(&self, g: Vec<f32>) {
        self.inner.borrow_mut().grad = Some(g);
    }

    /// Overwrite the buffer in place (shape must match). Used by the
    /// optimizer and checkpoint loading.
    pub fn copy_from(&self, data: &[f32]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::shape(format!(
                "copy_from: expected {} values, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}",
            inner.shape, inner.requires_grad
        )?;
        if inner.data.len() <= 8 {
            write!(f, ", data={:?})", inner.data)
        } else {
            write!(f, ", data=[{} values])", inner.data.len())
        }
    }
}

/// Box-Muller standard normal.
fn gauss(rng: &mut impl Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
