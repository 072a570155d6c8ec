//! Datasets: IDX ingestion, synthetic class blobs and non-IID client partitioning.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, write_idx_images, write_idx_labels};
pub use partition::{partition, partition_indices, PartitionPlan};
pub use synth::{synth_blobs, BLOB_SPREAD};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Labelled images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if images.iter().any(|im| im.values().iter().any(|p| !(0.0..=1.0).contains(p))) {
            return Err(Error::invalid("pixel outside [0, 1]"));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::invalid("images of differing shapes"));
            }
        }
        Ok(Self { images, labels, classes })
    }

    pub fn empty(classes: usize) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|im| im.shape())
    }

    pub fn get(&self, index: usize) -> (&Tensor, usize) {
        (&self.images[index], self.labels[index])
    }

    /// `(image, label)` pairs, cloned, in dataset order.
    pub fn examples(&self) -> Vec<(Tensor, usize)> {
        self.images.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }

    /// Splits off the last `per_class` samples of every class as a held-out set.
    pub fn split_holdout(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for class in 0..self.classes {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if idx.len() < per_class {
                return Err(Error::invalid(format!(
                    "class {class} has {} samples, cannot hold out {per_class}",
                    idx.len()
                )));
            }
            let cut = idx.len() - per_class;
            keep.extend_from_slice(&idx[..cut]);
            held.extend_from_slice(&idx[cut..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&keep), self.subset(&held)))
    }
}
