//! Dense rank-4 tensors in (batch, channel, height, width) order.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
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

    /// Pixels per channel plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Checks every extent against `other`, naming the first offending one.
    pub fn ensure_eq(&self, op: &'static str, other: &Shape) -> Result<()> {
        ensure_dim(op, "batch", self.n, other.n)?;
        ensure_dim(op, "channels", self.c, other.c)?;
        ensure_dim(op, "height", self.h, other.h)?;
        ensure_dim(op, "width", self.w, other.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor with row-major storage.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose element at (n, c, y, x) is `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(v * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Slice of one (sample, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Slice holding all channels of one batch sample.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.sample();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Reinterprets the storage under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.ensure_eq("zip_map", &other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.shape.ensure_eq("axpy", &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.shape.ensure_eq("add_assign", &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.shape.ensure_eq("dot", &other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Extracts batch sample `n` as a batch-of-one tensor.
    pub fn select(&self, n: usize) -> Self {
        let shape = Shape::new(1, self.shape.c, self.shape.h, self.shape.w);
        Tensor {
            shape,
            data: self.sample(n).to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.sample() * parts.len());
        let mut n = 0;
        for p in parts {
            ensure_dim("stack", "channels", p.shape.c, s.c)?;
            ensure_dim("stack", "height", p.shape.h, s.h)?;
            ensure_dim("stack", "width", p.shape.w, s.w)?;
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of every plane.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.shape.h || left + w > self.shape.w {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.shape.h, self.shape.w
            )));
        }
        let shape = Shape::new(self.shape.n, self.shape.c, h, w);
        Ok(Tensor::from_fn(shape, |n, c, y, x| self.at(n, c, y + top, x + left)))
    }

    /// Repeats a single-channel tensor into `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        ensure_dim("replicate_channels", "channels", self.shape.c, 1)?;
        let shape = Shape::new(self.shape.n, channels, self.shape.h, self.shape.w);
        Ok(Tensor::from_fn(shape, |n, _, y, x| self.at(n, 0, y, x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 1)[0], 1100.0);
        assert_eq!(t.select(1).at(0, 0, 0, 0), 1000.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn shape_error_names_dimension() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 5));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn stack_and_select_roundtrip() {
        let a = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 1.0);
        let b = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(s.select(1), b);
    }

    #[test]
    fn replicate_gray() {
        let g = Tensor::<f64>::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y * 2 + x) as f64);
        let rgb = g.replicate_channels(3).unwrap();
        assert_eq!(rgb.plane(0, 2), g.plane(0, 0));
    }
}
