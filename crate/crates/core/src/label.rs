use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-pixel integer labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: [1, 1, height, width],
                got: [1, 1, 1, data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u32) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.data
    }

    pub fn max_label(&self) -> Option<u32> {
        self.data.iter().copied().max()
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut out = self.data.clone();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                expected: [1, 1, self.height, self.width],
                got: [1, 1, other.height, other.width],
            });
        }
        Ok(())
    }
}
