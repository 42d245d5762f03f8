//! Dense rank-4 `(N, C, H, W)` tensors and the primitive layers built on them.
//!
//! Every primitive has a forward function and a hand-written backward
//! function. None of them allocate hidden state: callers keep whatever the
//! backward pass needs (inputs, argmax indices, normalized activations).

mod activation;
pub(crate) mod conv;
mod gradcheck;
mod norm;
mod pool;

pub use activation::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, softmax_channels, softmax_channels_backward,
};
pub use conv::{
    conv2d, conv2d_backward, conv2d_with, transposed_conv2d, transposed_conv2d_backward, transposed_conv2d_with,
    ConvGeometry, ConvGrads, Padding,
};
pub use gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_FD_EPS};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNormCache, BatchNormGrads, BnMode};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolMode, PoolOutput};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(H, W)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor::from_vec", "data length", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    /// Builds a tensor by converting `f64` values, e.g. dataset pixels.
    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; it must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("Tensor::set_grad", "gradient length", self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![T::zero(); self.data.len()]);
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::shape("Tensor::reshape", "element count", self.shape.len(), shape.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.item();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous slice of one `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape("Tensor::add", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
            grad: None,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape("Tensor::add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `sum(self * other)`, the Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape("Tensor::dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch items `indices` (in order) into a new tensor.
    pub fn select_items(&self, indices: &[usize]) -> Self {
        let s = Shape { n: indices.len(), ..self.shape };
        let mut data = Vec::with_capacity(s.len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor { shape: s, data, grad: None }
    }

    /// Stacks batch items along `N`; all parts must agree on `(C, H, W)`.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("Tensor::concat_batch", "no tensors to concatenate"))?;
        let mut s = first.shape;
        s.n = 0;
        let mut data = Vec::new();
        for p in parts {
            ensure_item_shape("Tensor::concat_batch", first.shape, p.shape)?;
            s.n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: s, data, grad: None })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn ensure_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        let names = ["N", "C", "H", "W"];
        for ((&a, &b), name) in self.shape.dims().iter().zip(other.shape.dims().iter()).zip(names) {
            if a != b {
                return Err(Error::shape(op, name, a, b));
            }
        }
        Ok(())
    }
}

fn ensure_item_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    crate::error::ensure_dim(op, "C", a.c, b.c)?;
    crate::error::ensure_dim(op, "H", a.h, b.h)?;
    crate::error::ensure_dim(op, "W", a.w, b.w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("data length"), "{err}");
    }

    #[test]
    fn grad_buffer_must_match_shape() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn index_is_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        let t = Tensor::<f64>::from_vec(s, (0..s.len()).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(1, 2, 3, 4), (s.len() - 1) as f64);
        assert_eq!(t.at(1, 0, 0, 0), 60.0);
        assert_eq!(t.plane(0, 1)[0], 20.0);
    }

    #[test]
    fn select_and_concat_round_trip() {
        let s = Shape::new(3, 1, 2, 2);
        let t = Tensor::<f64>::from_vec(s, (0..12).map(f64::from).collect()).unwrap();
        let a = t.select_items(&[2, 0]);
        assert_eq!(a.item(0), t.item(2));
        let b = Tensor::concat_batch(&[t.select_items(&[0]), t.select_items(&[1, 2])]).unwrap();
        assert_eq!(b, t);
    }

    #[test]
    fn shape_error_names_dimension() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 4));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains(" W"), "{err}");
    }
}
