//! Row-major f32 tensors, rank 0..=2.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("rank {0} not supported (max 2)")]
    BadRank(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.len() > 2 {
            return Err(TensorError::BadRank(shape.len()));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Rows/cols when viewed as a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    /// Largest relative elementwise difference against `other`, where the
    /// denominator is max(|a|, |b|, 1). Infinite if shapes differ.
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let denom = (a.abs() as f64).max(b.abs() as f64).max(1.0);
                ((a as f64) - (b as f64)).abs() / denom
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1, 1, 1], vec![0.0]),
            Err(TensorError::BadRank(3))
        ));
    }

    #[test]
    fn rel_diff() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![1.0, 2.00001]).unwrap();
        assert!(a.max_rel_diff(&b) < 1e-4);
        assert!(a.max_rel_diff(&Tensor::vector(vec![1.0])).is_infinite());
    }
}
