//! Dense f64 tensors and a reverse-mode autodiff graph.
//!
//! Gradients are emitted as graph nodes, so the output of `backward` can be
//! differentiated again (double backward) with the same machinery.

mod fd;
mod graph;
mod kernels;
pub mod random_graphs;

pub use fd::finite_diff_grad;
pub use graph::{backward, backward_scalar, emax, emin, Evaluator, GradientMap, Node, Op};
pub use random_graphs::{double_backward_suite, first_order_suite, CheckReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("non-finite value produced by op {0}")]
    NonFinite(&'static str),
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![data.len()], data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Flat index of a 3-d coordinate.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape[1] + y) * self.shape[2] + x
    }
}
