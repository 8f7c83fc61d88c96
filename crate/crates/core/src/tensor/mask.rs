use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Per-position validity for a `[batch, len]` block of sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::shape("mask", &[batch, len], &[valid.len()]));
        }
        Ok(Mask { batch, len, valid })
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        Mask {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    /// Left-aligned masks: row `b` has its first `lengths[b]` positions valid.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > len) {
            return Err(Error::Param(format!(
                "valid length {l} exceeds padded length {len}"
            )));
        }
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |i| i < l))
            .collect();
        Ok(Mask {
            batch: lengths.len(),
            len,
            valid,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.len..(b + 1) * self.len]
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[b * self.len + i]
    }

    pub fn count(&self, b: usize) -> usize {
        self.row(b).iter().filter(|&&v| v).count()
    }

    /// Indices of the valid positions of row `b`, in order.
    pub fn valid_positions(&self, b: usize) -> Vec<usize> {
        (0..self.len).filter(|&i| self.is_valid(b, i)).collect()
    }

    pub fn is_all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// `[batch, len, 1]` tensor of ones at valid positions and zeros elsewhere.
    pub fn column<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([self.batch, self.len, 1], |i| {
            if self.valid[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub(crate) fn check(&self, op: &'static str, batch: usize, len: usize) -> Result<()> {
        if self.batch != batch || self.len != len {
            return Err(Error::shape(op, &[batch, len], &[self.batch, self.len]));
        }
        Ok(())
    }
}
