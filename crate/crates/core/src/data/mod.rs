//! Datasets, synthetic task generation and client partitioning.

mod csv_io;
mod partition;
mod synth;

pub use csv_io::{load_csv, write_csv};
pub use partition::{dirichlet_partition, iid_partition, split_holdout, HoldoutSplit, PartitionedDataset};
pub use synth::synth_blobs;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples with class labels. `features` is `[samples, ...feature dims]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    features: Vec<f32>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    class_count: usize,
}

impl DatasetShard {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} feature rows but {} labels", features.rows(), labels.len()),
            ));
        }
        Self::from_flat(features.shape()[1..].to_vec(), features.into_data(), labels, class_count)
    }

    pub fn from_flat(feature_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let dim: usize = feature_shape.iter().product();
        if feature_shape.is_empty() || dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} samples of shape {feature_shape:?}", features.len(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            features,
            feature_shape,
            labels,
            class_count,
        })
    }

    /// A shard with no samples, used where no holdout exists.
    pub fn empty(feature_shape: Vec<usize>, class_count: usize) -> Self {
        Self {
            features: Vec::new(),
            feature_shape,
            labels: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.features[i * d..(i + 1) * d]
    }

    /// All samples as one tensor.
    pub fn features(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::from_parts(shape, self.features.clone())
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.feature_shape);
        (Tensor::from_parts(shape, data), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> DatasetShard {
        let d = self.feature_dim();
        let mut features = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            features.extend_from_slice(self.sample(i));
        }
        DatasetShard {
            features,
            feature_shape: self.feature_shape.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}
