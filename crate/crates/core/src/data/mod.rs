//! Datasets, augmentation and deterministic batching.

mod augment;
mod directory;
mod image;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment_view, make_small_crops, make_views, resize_region, AugmentConfig, ViewPair};
pub use directory::load_directory;
pub use image::Image;
pub use synthetic::{class_texture, generate_synthetic, SyntheticSpec, TextureParams, MAX_CLASSES};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic { seed: u64, spec: SyntheticSpec },
    Directory { path: PathBuf, side: usize },
}

/// Labelled images of identical dimensions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub source: DataSource,
    /// Generating parameters, for synthetic data.
    pub texture_params: Option<Vec<TextureParams>>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize, source: DataSource) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(first) = images.first() {
            let dims = (first.height(), first.width(), first.channels());
            if images.iter().any(|i| (i.height(), i.width(), i.channels()) != dims) {
                return Err(Error::invalid("dataset images differ in dimensions"));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self { images, labels, n_classes, source, texture_params: None })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            source: self.source.clone(),
            texture_params: self.texture_params.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Stratified split: every `k`-th sample of each class (by position)
    /// goes to the test side, with `k = round(1 / test_fraction)`.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::invalid(format!("test fraction {test_fraction} outside (0, 1)")));
        }
        let k = (1.0 / test_fraction).round().max(2.0) as usize;
        let mut seen = vec![0usize; self.n_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] % k == k - 1 {
                test.push(i);
            } else {
                train.push(i);
            }
            seen[l] += 1;
        }
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// SHA-256 over dimensions, labels and little-endian pixel values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for (img, &l) in self.images.iter().zip(&self.labels) {
            for d in [img.height(), img.width(), img.channels(), l] {
                h.update((d as u64).to_le_bytes());
            }
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let first = self.images.first();
        DatasetManifest {
            source: self.source.clone(),
            n_samples: self.len(),
            n_classes: self.n_classes,
            side: first.map_or(0, |i| i.height()),
            channels: first.map_or(0, |i| i.channels()),
            sha256: self.content_hash(),
        }
    }
}

/// Structured summary of a dataset with its content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub n_samples: usize,
    pub n_classes: usize,
    pub side: usize,
    pub channels: usize,
    pub sha256: String,
}

/// Per-sample augmentation seed for a given epoch.
pub fn aug_seed(epoch_seed: u64, index: usize) -> u64 {
    rng::derive_seed(&[epoch_seed, tag::VIEW_Q ^ tag::VIEW_K, index as u64])
}

/// Shuffled sample order for one epoch, split into full batches.
pub fn batch_indices(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::invalid(format!("batch size {batch_size} outside [1, {len}]")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(&[epoch_seed, tag::SHUFFLE]));
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// One batch of augmented pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
    pub pairs: Vec<ViewPair>,
}

/// Iterator over the augmented batches of one epoch.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    aug: AugmentConfig,
    epoch_seed: u64,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.order.next()?;
        let pairs = indices
            .iter()
            .map(|&i| make_views(&self.dataset.images[i], aug_seed(self.epoch_seed, i), &self.aug))
            .collect();
        Some(Batch { indices, pairs })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Epoch-seeded shuffle into full batches (the partial remainder is dropped),
/// with per-sample augmentation seeds derived from `(epoch_seed, index)`.
pub fn make_batches<'a>(dataset: &'a Dataset, batch_size: usize, epoch_seed: u64, aug: &AugmentConfig) -> Result<Batches<'a>> {
    let order = batch_indices(dataset.len(), batch_size, epoch_seed)?;
    Ok(Batches { dataset, aug: aug.clone(), epoch_seed, order: order.into_iter() })
}
