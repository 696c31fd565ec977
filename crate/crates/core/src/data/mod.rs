//! Datasets, the IDX file format, a procedural shapes dataset and the
//! corruption operators used as the domain-shift axis.

mod batches;
mod corrupt;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};

pub use batches::{batches, Batches};
pub use corrupt::{cell_prng, corrupt, CorruptionKind, CorruptionSpec};
pub use idx::{encode_images, encode_labels, load_idx, parse_images, parse_labels, write_idx};
pub use synth::{synth_shapes, SHAPE_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with values in `[0, 1]` and one label per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub name: String,
}

impl ImageDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageDataset {
            images,
            labels,
            num_classes,
            name: name.into(),
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

    /// `[C, H, W]` of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        let [c, h, w] = self.image_dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Stacks the images at `indices` into one `[k, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered length");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> ImageDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        ImageDataset {
            images,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Same labels, new pixels. Values are clamped into `[0, 1]`.
    pub(crate) fn with_images(&self, images: Tensor, name: String) -> ImageDataset {
        debug_assert_eq!(images.shape(), self.images.shape());
        ImageDataset {
            images: images.map(|v| v.clamp(0.0, 1.0)),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name,
        }
    }
}
