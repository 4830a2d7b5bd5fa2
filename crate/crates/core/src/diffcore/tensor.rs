use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array of `f64`, row-major.
///
/// This is the universal value type of the compute core: images, feature
/// maps, score maps, parameter matrices and scalars are all `Tensor`s.
/// Gradients live on the tape, not here; a `Tensor` is plain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like `new` but panics on mismatch; for shapes known statically at the call site.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("shape/buffer mismatch")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// All entries finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of `[c, i, j]` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx3(c, i, j)]
    }

    /// Row-major offset of `[i, j]` in a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Fill from an RNG, sampling i.i.d. normal(0, std).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("std must be finite and nonnegative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn idx3_is_row_major() {
        let t = Tensor::from_vec(vec![2, 2, 3], (0..12).map(|v| v as f64).collect());
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 1, 2), 5.0);
        assert_eq!(t.at3(1, 0, 0), 6.0);
        assert_eq!(t.at3(1, 1, 2), 11.0);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.25);
    }
}
