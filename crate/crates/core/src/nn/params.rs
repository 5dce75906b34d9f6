//! Flat parameter container shared by all models.

use serde::{Deserialize, Serialize};

use crate::tensor::Elem;

/// All weights and biases of a network in one flat array, canonical layer
/// order (per layer: weights row-major, then biases). Elementwise arithmetic
/// never reorders, so identical operations reproduce bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<Elem>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<Elem>) -> Self {
        ParamVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Elem] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [Elem] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<Elem> {
        self.0
    }

    /// self += c * other
    pub fn add_scaled(&mut self, other: &ParamVector, c: Elem) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: Elem) {
        for a in &mut self.0 {
            *a *= c;
        }
    }

    /// Euclidean norm.
    pub fn norm(&self) -> Elem {
        self.0.iter().map(|v| v * v).sum::<Elem>().sqrt()
    }

    pub fn max_abs(&self) -> Elem {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn all_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_scaled_is_exact_elementwise() {
        let mut a = ParamVector::from_vec(vec![1.0, 2.0, -3.0]);
        let b = ParamVector::from_vec(vec![0.5, -1.0, 2.0]);
        a.add_scaled(&b, 2.0);
        assert_eq!(a.as_slice(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn norm_of_axis_vector() {
        let v = ParamVector::from_vec(vec![0.0, -3.0, 4.0]);
        assert_eq!(v.norm(), 5.0);
    }
}
