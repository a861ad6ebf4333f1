//! Slices and volumes.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single-channel 2D image stored as an `[H, W]` tensor.
pub type Slice<T> = Tensor<T>;

pub(crate) fn slice_extent<T: Scalar>(s: &Slice<T>) -> Result<(usize, usize)> {
    match *s.shape() {
        [h, w] => Ok((h, w)),
        ref other => Err(Error::Shape(format!("slice must be [H, W], got {other:?}"))),
    }
}

/// Ordered stack of equally sized slices, tagged with its source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    slices: Vec<Slice<T>>,
    dataset: usize,
}

impl<T: Scalar> Volume<T> {
    pub fn new(slices: Vec<Slice<T>>, dataset: usize) -> Result<Self> {
        let first = slices.first().ok_or(Error::EmptyVolume)?;
        let expected = slice_extent(first)?;
        for (index, s) in slices.iter().enumerate() {
            let got = slice_extent(s)?;
            if got != expected {
                return Err(Error::RaggedVolume { index, expected, got });
            }
        }
        Ok(Self { slices, dataset })
    }

    pub fn slices(&self) -> &[Slice<T>] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn dataset(&self) -> usize {
        self.dataset
    }

    pub fn extent(&self) -> Result<(usize, usize)> {
        slice_extent(&self.slices[0])
    }

    /// Volume with slices reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { slices: order.iter().map(|&i| self.slices[i].clone()).collect(), dataset: self.dataset }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_volume_rejected() {
        let r = Volume::new(vec![Tensor::<f64>::zeros(&[8, 8]), Tensor::zeros(&[8, 9])], 0);
        assert!(matches!(r, Err(Error::RaggedVolume { index: 1, .. })));
    }
}
