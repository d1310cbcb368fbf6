use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Images (N×C×H×W, intensities in [0,1]) with their class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::input(format!(
                "images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.batch_len() != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.batch_len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::input("need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// C×H×W of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `count` samples (or all, if fewer).
    pub fn take(&self, count: usize) -> LabeledBatch {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `self` followed by `other`, as a new batch.
    pub fn concat(&self, other: &LabeledBatch) -> Result<LabeledBatch> {
        if self.num_classes != other.num_classes {
            return Err(Error::input("cannot concatenate batches with different class counts"));
        }
        let images = Tensor::concat(&[&self.images, &other.images])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledBatch::new(images, labels, self.num_classes)
    }
}
