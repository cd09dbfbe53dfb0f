//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted n-d array. Operations live
//! on [`Tape`]: calling e.g. `tape.mul(&a, &b)` computes the value and, when
//! at least one input is tracked on that tape, records a node so that
//! [`Tape::backward`] can later produce gradients for every tracked leaf.
//! Untracked inputs flow through the same code path with zero recording
//! overhead, which is how frozen parameters and inference work.

mod kernels;
mod ops;
mod tape;

pub use tape::{Gradients, NodeRef, Tape};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Immutable dense array of f64 values in row-major order.
///
/// Cloning is cheap (the buffer is shared). A tensor is *tracked* when it
/// carries a node reference into a live tape; only tracked tensors
/// participate in differentiation.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from raw data; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    /// 0-d tensor holding a single value.
    pub fn scalar_value(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Standard-normal samples drawn from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The value of a 0-d (or single-element) tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major element access; panics on out-of-range (test helper).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {:?} out of range {:?} at axis {}", index, self.shape, i);
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    /// Replace the backing buffer in place (optimizer updates).
    pub(crate) fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        self.data = Arc::new(data);
        self.node = None;
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracked={}",
            self.shape,
            self.node.is_some()
        )?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &self.data[..])?;
        }
        write!(f, ")")
    }
}
