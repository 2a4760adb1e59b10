//! Dense row-major `f64` tensors and integer label grids.
//!
//! 5-D activations use the layout `[batch, channel, depth, height, width]`
//! with width varying fastest.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&e| e > 0) || data.is_empty(),
            "tensor extents must be positive, got {:?}",
            shape
        );
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            "shape {:?} holds {} values, got {}",
            shape,
            len,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
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
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        ensure!(self.data.len() == 1, "item() on tensor of shape {:?}", self.shape);
        Ok(self.data[0])
    }

    /// The shape as `[B, C, D, H, W]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        self.shape
            .as_slice()
            .try_into()
            .map_err(|_| contract!("expected a 5-D tensor, got shape {:?}", self.shape))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        ensure!(
            self.shape == other.shape,
            "dot of shapes {:?} and {:?}",
            self.shape,
            other.shape
        );
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        ensure!(len == self.data.len(), "cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Integer class labels laid out as `[batch, depth, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTensor {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl LabelTensor {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "label shape {:?} holds {} values, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![1.0]).is_err());
    }

    #[test]
    fn dims5_requires_rank_five() {
        assert_eq!(Tensor::zeros(&[1, 2, 3, 4, 5]).dims5().unwrap(), [1, 2, 3, 4, 5]);
        assert!(Tensor::zeros(&[1, 2, 3]).dims5().is_err());
    }
}
