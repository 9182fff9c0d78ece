use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Tensors are plain values; they only take part in differentiation once
/// registered on a [`Tape`](super::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if shape.is_empty() || shape.contains(&0) || expected != values.len() {
            return Err(Error::Construction {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let values = rows.iter().flatten().copied().collect();
        Tensor {
            shape: vec![rows.len(), cols],
            values,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.values {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` view; rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.values[i * c + j]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.values.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.values.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (numel(shape) / shape.last().copied().unwrap_or(1), shape.last().copied().unwrap_or(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_construction() {
        let t = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.dims2(), (2, 2));
        assert_eq!(t.at(1, 1), 1.0);
        assert_eq!(t.at(0, 1), 0.0);
    }

    #[test]
    fn zero_vector() {
        let t = Tensor::new([3], vec![0.0; 3]).unwrap();
        assert_eq!(t.dims2(), (1, 3));
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = Tensor::new([2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Construction { expected: 2, got: 3, .. }));
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Tensor::new([0, 3], vec![]).is_err());
    }
}
