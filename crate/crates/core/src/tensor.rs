//! Dense rank-3 feature maps.
//!
//! Layout is row-major over `(time, frequency, channel)`: the channel index
//! varies fastest, so each `(t, f)` position owns a contiguous run of `c`
//! values. Convolutions treat that run as one im2col row.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    t: usize,
    f: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(t: usize, f: usize, c: usize) -> Self {
        Self { t, f, c, data: vec![T::zero(); t * f * c] }
    }

    pub fn filled(t: usize, f: usize, c: usize, value: T) -> Self {
        Self { t, f, c, data: vec![value; t * f * c] }
    }

    pub fn from_vec(t: usize, f: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != t * f * c {
            return Err(Error::shape(format!(
                "tensor {t}x{f}x{c} needs {} values, got {}",
                t * f * c,
                data.len()
            )));
        }
        Ok(Self { t, f, c, data })
    }

    pub fn from_fn(t: usize, f: usize, c: usize, mut g: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(t * f * c);
        for ti in 0..t {
            for fi in 0..f {
                for ci in 0..c {
                    data.push(g(ti, fi, ci));
                }
            }
        }
        Self { t, f, c, data }
    }

    /// Single-channel tensor from a `T x F` feature matrix stored row-major.
    pub fn from_features(frames: usize, bins: usize, values: &[T]) -> Result<Self> {
        Self::from_vec(frames, bins, 1, values.to_vec())
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn f(&self) -> usize {
        self.f
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.f, self.c)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.t * self.f
    }

    #[inline]
    pub fn index(&self, t: usize, f: usize, c: usize) -> usize {
        debug_assert!(t < self.t && f < self.f && c < self.c);
        (t * self.f + f) * self.c + c
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, c: usize) -> T {
        self.data[self.index(t, f, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, c: usize, v: T) {
        let i = self.index(t, f, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, g: impl Fn(T) -> T) -> Self {
        Self { t: self.t, f: self.f, c: self.c, data: self.data.iter().map(|&v| g(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "elementwise sum of {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders frames; `order[i]` is the source frame of output frame `i`.
    pub fn permute_time(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.t);
        let row = self.f * self.c;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            data.extend_from_slice(&self.data[src * row..(src + 1) * row]);
        }
        Self { t: self.t, f: self.f, c: self.c, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            t: self.t,
            f: self.f,
            c: self.c,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_fastest() {
        let x = Tensor3::<f64>::from_fn(2, 3, 4, |t, f, c| (t * 100 + f * 10 + c) as f64);
        assert_eq!(x.data()[0..4], [0.0, 1.0, 2.0, 3.0]);
        assert_eq!(x.get(1, 2, 3), 123.0);
        assert_eq!(x.index(1, 0, 0), 12);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor3::<f32>::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn permute_time_moves_whole_frames() {
        let x = Tensor3::<f64>::from_fn(3, 2, 1, |t, f, _| (t * 2 + f) as f64);
        let y = x.permute_time(&[2, 0, 1]);
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
    }
}
