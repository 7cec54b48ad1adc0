//! In-memory dataset split consumed by search and evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled split: images `[n, c, h, w]` scaled to [0, 1], integer labels.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl DataSplit {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidDataset("empty split".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes,
                sample: i,
            });
        }
        Ok(DataSplit {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `[start, end)` in dataset order.
    pub fn range(&self, start: usize, end: usize) -> Result<DataSplit> {
        Ok(DataSplit {
            images: self.images.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
        })
    }

    /// Gathers an arbitrary subset (minibatches, shuffled epochs).
    pub fn gather(&self, rows: &[usize]) -> Result<DataSplit> {
        Ok(DataSplit {
            images: self.images.gather_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }
}
