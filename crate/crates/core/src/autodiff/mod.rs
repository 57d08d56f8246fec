//! Reverse-mode differentiation and the optimizer.
//!
//! Model code (field, compositing, encoders, losses) is written once against
//! the [`Backend`] trait. [`Eager`] evaluates it with plain tensors; [`Tape`]
//! evaluates the same code while recording a graph that [`Tape::backward`]
//! differentiates. Both backends call the same forward kernels, so a value
//! computed with gradient tracking is bit-identical to the untracked one.

mod adam;
mod check;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use check::{central_difference, grad_check};
pub use tape::{Gradients, Tape, Var};

use crate::tensor::{self, Tensor};

/// The closed set of differentiable primitives the engine is built from.
pub trait Backend {
    type Value: Clone;

    fn constant(&self, t: Tensor) -> Self::Value;
    /// Copies the forward value out.
    fn value(&self, v: &Self::Value) -> Tensor;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    /// Adds a bias vector to every row of a matrix.
    fn add_row(&self, x: &Self::Value, bias: &Self::Value) -> Self::Value;
    fn add(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn scale(&self, x: &Self::Value, c: f64) -> Self::Value;
    fn offset(&self, x: &Self::Value, c: f64) -> Self::Value;
    fn sin(&self, x: &Self::Value) -> Self::Value;
    fn cos(&self, x: &Self::Value) -> Self::Value;
    fn exp(&self, x: &Self::Value) -> Self::Value;
    fn ln(&self, x: &Self::Value) -> Self::Value;
    fn softplus(&self, x: &Self::Value) -> Self::Value;
    fn sigmoid(&self, x: &Self::Value) -> Self::Value;
    fn tanh(&self, x: &Self::Value) -> Self::Value;
    fn abs(&self, x: &Self::Value) -> Self::Value;
    fn square(&self, x: &Self::Value) -> Self::Value;
    fn sum(&self, x: &Self::Value) -> Self::Value;
    fn mean(&self, x: &Self::Value) -> Self::Value;
    fn sum_last(&self, x: &Self::Value) -> Self::Value;
    fn reshape(&self, x: &Self::Value, shape: &[usize]) -> Self::Value;
    fn concat_cols(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn slice_cols(&self, x: &Self::Value, start: usize, len: usize) -> Self::Value;
    fn crop(&self, img: &Self::Value, y0: usize, x0: usize, h: usize, w: usize) -> Self::Value;
    fn excl_cumprod(&self, x: &Self::Value) -> Self::Value;
    fn excl_cumsum(&self, x: &Self::Value) -> Self::Value;
    fn ray_sum(&self, w: &Self::Value, vals: &Self::Value) -> Self::Value;
    /// Scales a tensor to unit L2 norm over all its elements.
    fn normalize(&self, x: &Self::Value) -> Self::Value;
    fn dot(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn logsumexp(&self, x: &Self::Value) -> Self::Value;
    fn max(&self, x: &Self::Value) -> Self::Value;
    fn conv2d(&self, x: &Self::Value, w: &Self::Value, stride: usize, pad: usize) -> Self::Value;
    fn resize_area(&self, x: &Self::Value, ho: usize, wo: usize) -> Self::Value;

    fn scalar(&self, v: f64) -> Self::Value {
        self.constant(Tensor::scalar(v))
    }

    fn item(&self, v: &Self::Value) -> f64 {
        self.value(v).item()
    }
}

/// Plain forward evaluation without gradient tracking.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }
    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }
    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        tensor::matmul(a, b)
    }
    fn add_row(&self, x: &Tensor, bias: &Tensor) -> Tensor {
        tensor::add_row(x, bias)
    }
    fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x + y)
    }
    fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x - y)
    }
    fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x * y)
    }
    fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        x.map(|v| v * c)
    }
    fn offset(&self, x: &Tensor, c: f64) -> Tensor {
        x.map(|v| v + c)
    }
    fn sin(&self, x: &Tensor) -> Tensor {
        x.map(f64::sin)
    }
    fn cos(&self, x: &Tensor) -> Tensor {
        x.map(f64::cos)
    }
    fn exp(&self, x: &Tensor) -> Tensor {
        x.map(f64::exp)
    }
    fn ln(&self, x: &Tensor) -> Tensor {
        x.map(f64::ln)
    }
    fn softplus(&self, x: &Tensor) -> Tensor {
        x.map(tensor::softplus)
    }
    fn sigmoid(&self, x: &Tensor) -> Tensor {
        x.map(tensor::sigmoid)
    }
    fn tanh(&self, x: &Tensor) -> Tensor {
        x.map(f64::tanh)
    }
    fn abs(&self, x: &Tensor) -> Tensor {
        x.map(f64::abs)
    }
    fn square(&self, x: &Tensor) -> Tensor {
        x.map(|v| v * v)
    }
    fn sum(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum())
    }
    fn mean(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
    }
    fn sum_last(&self, x: &Tensor) -> Tensor {
        tensor::sum_last(x)
    }
    fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        x.clone().reshaped(shape.to_vec())
    }
    fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Tensor {
        tensor::concat_cols(a, b)
    }
    fn slice_cols(&self, x: &Tensor, start: usize, len: usize) -> Tensor {
        tensor::slice_cols(x, start, len)
    }
    fn crop(&self, img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        tensor::crop(img, y0, x0, h, w)
    }
    fn excl_cumprod(&self, x: &Tensor) -> Tensor {
        tensor::excl_cumprod(x)
    }
    fn excl_cumsum(&self, x: &Tensor) -> Tensor {
        tensor::excl_cumsum(x)
    }
    fn ray_sum(&self, w: &Tensor, vals: &Tensor) -> Tensor {
        tensor::ray_sum(w, vals)
    }
    fn normalize(&self, x: &Tensor) -> Tensor {
        let n = tensor::norm(x);
        x.map(|v| v / n)
    }
    fn dot(&self, a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::scalar(tensor::dot(a, b))
    }
    fn logsumexp(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(tensor::logsumexp(x))
    }
    fn max(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }
    fn conv2d(&self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        tensor::conv2d(x, w, stride, pad)
    }
    fn resize_area(&self, x: &Tensor, ho: usize, wo: usize) -> Tensor {
        tensor::resize_area(x, ho, wo)
    }
}
