//! Dense 4-D tensors and their storage.

mod io;
pub mod memory;
mod scalar;

use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

pub use self::io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};
pub use self::scalar::Scalar;
use crate::error::{Error, Result};

/// `(batch, channels, height, width)`; channels-last layouts reuse the same
/// four slots with the feature axis last.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// A rank-1 vector stored in the last slot.
    pub const fn vector(len: usize) -> Self {
        Shape([1, 1, 1, len])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// A counted buffer; see [`memory`].
pub struct Storage<T: Scalar>(Vec<T>);

impl<T: Scalar> Storage<T> {
    pub fn new(data: Vec<T>) -> Self {
        memory::track_alloc(data.capacity() * std::mem::size_of::<T>());
        Storage(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    pub fn into_vec(mut self) -> Vec<T> {
        let data = std::mem::take(&mut self.0);
        memory::track_free(data.capacity() * std::mem::size_of::<T>());
        data
    }
}

impl<T: Scalar> Drop for Storage<T> {
    fn drop(&mut self) {
        memory::track_free(self.0.capacity() * std::mem::size_of::<T>());
    }
}

impl<T: Scalar> Clone for Storage<T> {
    fn clone(&self) -> Self {
        Storage::new(self.0.clone())
    }
}

impl<T: Scalar> Deref for Storage<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Scalar> DerefMut for Storage<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// Row-major 4-D array with an optional gradient buffer of the same length.
#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Storage<T>,
    grad: Option<Storage<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::NAME)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: Storage::zeros(shape.numel()),
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: Storage::new(vec![value; shape.numel()]),
            grad: None,
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::invalid_shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Storage::new(data),
            grad: None,
        })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Storage::new(data),
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        let Tensor { data, .. } = self;
        data.into_vec()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.numel();
        self.grad.get_or_insert_with(|| Storage::zeros(len))
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// The contiguous `(h, w)` plane at batch `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h() * self.shape.w();
        let start = self.shape.offset(n, c, 0, 0);
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h() * self.shape.w();
        let start = self.shape.offset(n, c, 0, 0);
        &mut self.data[start..start + hw]
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: Storage::new(self.data.iter().map(|&v| f(v)).collect()),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Storage::new(self.data.iter().map(|v| U::c(v.f64())).collect()),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch item `n` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let [_, c, h, w] = self.shape.0;
        let len = c * h * w;
        let start = n * len;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: Storage::new(self.data[start..start + len].to_vec()),
            grad: None,
        }
    }

    /// Stack `(1, C, H, W)` tensors of one shape along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for item in items {
            let [in_n, ic, ih, iw] = item.shape.0;
            if (ic, ih, iw) != (c, h, w) {
                return Err(Error::shape("stack", first.shape, item.shape));
            }
            data.extend_from_slice(item.data());
            n += in_n;
        }
        Tensor::from_vec(Shape::new(n, c, h, w), data)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.strides(), [60, 20, 5, 1]);
        assert_eq!(s.offset(1, 2, 3, 4), 119);
        assert_eq!(format!("{s}"), "(2,3,4,5)");
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn grad_buffer_matches_data_length() {
        let mut t = Tensor::<f32>::zeros([2, 3, 1, 1]);
        assert!(t.grad().is_none());
        t.grad_mut()[5] = 1.0;
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn storage_is_tracked() {
        let before = memory::live_bytes();
        let t = Tensor::<f32>::zeros([1, 1, 10, 10]);
        assert_eq!(memory::live_bytes() - before, 400);
        drop(t);
        assert_eq!(memory::live_bytes(), before);
    }
}
