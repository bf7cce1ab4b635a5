//! Labelled image collections: the synthetic sinusoid task, CIFAR-10 binary
//! batches, and stratified sub-sampling.

mod cifar;
mod sinusoids;
mod subsample;

pub use cifar::{load_cifar10, load_cifar10_batch, ChannelStats, CifarBatch, CIFAR10_CLASSES, CIFAR_RECORD_BYTES};
pub use sinusoids::{generate_sinusoids, read_sinusoids, write_sinusoids, SinusoidsSpec};
pub use subsample::subsample;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        let classes = class_names.len();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the given samples, in order, into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }

    /// New set containing only the given samples.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.class_names.clone())
    }
}
