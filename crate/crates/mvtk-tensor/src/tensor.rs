use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::shape::Shape;

/// Dense rank-4 tensor, row-major contiguous. Cloning is cheap (shared
/// storage); all ops produce fresh buffers, so shared data is never mutated
/// behind another handle except through `data_mut`, which un-shares first.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("data length {} != numel of {}", data.len(), shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor {
            shape,
            data: Arc::new(vec![T::ZERO; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, v: T) -> Tensor<T> {
        Tensor {
            shape,
            data: Arc::new(vec![v; shape.numel()]),
        }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::full(Shape::mat(1, 1), v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Tensor<T> {
        let data = (0..shape.numel()).map(|i| f(i)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; un-shares the buffer if aliased.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    /// Reinterpret the shape; element count must be preserved. Never copies.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.numel() != self.shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} -> {} changes element count", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all elements. Panics on shape mismatch (test helper).
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    /// Precision conversion (f64 gradcheck models are built from f32 specs).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }
}
