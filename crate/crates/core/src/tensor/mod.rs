//! Dense NCHW tensors and the differentiable primitives the networks are built from.
//!
//! Every forward op has a matching `*_backward` that takes the upstream gradient
//! (shaped like the op's output) and returns gradients shaped like the op's inputs.
//! Ops are pure functions; the only mutable state is [`BnState`], passed explicitly.

mod activation;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod loss;
mod param;
mod pool;
mod reshape;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, BnCache, BnMode, BnState};
pub use conv::{conv2d, conv2d_backward, ConvGrads, Padding};
pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_weighted};
pub use param::{ParamRole, ParamTensor};
pub use pool::{
    avgpool2x2, avgpool2x2_backward, global_avg_pool, global_avg_pool_backward, maxpool2x2,
    maxpool2x2_backward,
};
pub use reshape::{concat_channels, depth_to_space, space_to_depth, split_channels};

/// Batch, channels, rows, cols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one (h, w) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A contiguous row-major 4-D `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Result<Self> {
        check_dims(shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Shape, std: f32, rng: &mut impl Rng) -> Result<Self> {
        check_dims(shape)?;
        let data = (0..shape.numel())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Result<Self> {
        check_dims(shape)?;
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Tensor { shape, data })
    }

    pub(crate) fn zeros_unchecked(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Slice of one sample's `c*h*w` values.
    pub fn sample(&self, n: usize) -> &[f32] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let s = self.shape.sample();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {} into {}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f32) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Index and value of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

fn check_dims(shape: Shape) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::shape(format!("all dimensions must be >= 1, got {shape}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::zeros(Shape::new(1, 0, 2, 2)).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn detects_non_finite() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 1, 3)).unwrap();
        assert!(t.is_finite());
        t.data_mut()[2] = f32::NAN;
        assert_eq!(t.first_non_finite().map(|(i, _)| i), Some(2));
    }
}
