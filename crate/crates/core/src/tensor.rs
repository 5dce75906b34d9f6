//! Dense row-major tensors over the crate-wide element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type: 64-bit by default, 32-bit behind the `f32` feature.
/// Oracle tolerances throughout the test suite assume the 64-bit build.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

/// Dense n-dimensional array, row-major flat storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("shape {shape:?} does not describe {} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Elem> {
        self.data
    }

    /// Reinterpret the flat data under a new shape of equal volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("cannot reshape {:?} into {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Leading dimension, conventionally the batch size.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension slice.
    pub fn example_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Flat view of example `b` (leading-dimension slice).
    pub fn example(&self, b: usize) -> &[Elem] {
        let n = self.example_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn example_mut(&mut self, b: usize) -> &mut [Elem] {
        let n = self.example_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Stack a subset of leading-dimension slices into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.batch(),
                });
            }
            data.extend_from_slice(self.example(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    /// self += other, elementwise.
    pub fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self *= c, elementwise.
    pub fn scale(&mut self, c: Elem) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Largest absolute element, 0 for the (impossible) empty tensor.
    pub fn max_abs(&self) -> Elem {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Elem {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_volume() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn example_slices_are_disjoint_rows() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.example(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.example(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_reorders_examples() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(t.gather(&[3]).is_err());
    }

    #[test]
    fn finite_check_detects_nan() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.check_finite("x").is_ok());
        t.data_mut()[3] = Elem::NAN;
        assert!(t.check_finite("x").is_err());
    }
}
