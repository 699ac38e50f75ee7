//! Datasets, client shards and the non-IID partitioner.

pub mod idx;
mod partition;
mod synthetic;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx_images, load_idx_labels, read_idx_images, IdxImages};
pub use partition::{dirichlet_partition, Partition};
pub use synthetic::synthetic_blobs;

/// Labelled samples. `images` has the sample count as its leading dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

/// One client's slice of a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    /// Loads a full image/label file pair.
    pub fn from_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let raw = read_idx_images(images)?;
        let labels = load_idx_labels(labels)?;
        let all: Vec<usize> = (0..raw.count).collect();
        Dataset::from_idx_subset(&raw, &labels, &all, num_classes)
    }

    /// Builds a dataset from selected rows of raw IDX payloads.
    pub fn from_idx_subset(images: &IdxImages, labels: &[u8], indices: &[usize], num_classes: usize) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= images.count) {
            return Err(Error::Argument(format!("index {bad} out of range for {} samples", images.count)));
        }
        let picked = indices.iter().map(|&i| usize::from(labels[i])).collect();
        Dataset::new(images.to_tensor(indices), picked, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
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

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks the given samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let w = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let shape = std::iter::once(indices.len()).chain(self.sample_shape().iter().copied()).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

/// `n` distinct indices drawn uniformly from `0..len`, in draw order.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Argument(format!("cannot draw {n} samples from {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, len, n).into_vec())
}

/// Uniform sample of `n` items without replacement.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    dataset.subset(&subsample_indices(dataset.len(), n, seed)?)
}
