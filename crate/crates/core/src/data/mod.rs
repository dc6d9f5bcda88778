//! Segmentation datasets: the synthetic generator and on-disk storage.

mod store;
mod synth;

pub use store::{load, save, Manifest, ManifestEntry};
pub use synth::{generate, ContextMode, SynthSpec, NOISE_SIGMA};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One image with its label map (0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, spatial...]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spatial: Vec<usize>,
    /// Foreground labels.
    pub num_labels: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `[B, channels, spatial...]`
    pub images: Tensor,
    /// One-hot `[B, num_labels + 1, spatial...]`, background first.
    pub targets: Tensor,
    /// Label maps, concatenated per sample.
    pub labels: Vec<u8>,
}

impl SampleBatch {
    /// Targets shaped like the network head: the background channel is
    /// dropped when there is a single (sigmoid) label.
    pub fn head_targets(&self) -> Tensor {
        if self.targets.channels() != 2 {
            return self.targets.clone();
        }
        let s = self.targets.spatial_len();
        let mut shape = self.targets.shape().to_vec();
        shape[1] = 1;
        let data = self
            .targets
            .data()
            .chunks(2 * s)
            .flat_map(|c| c[s..].iter().copied())
            .collect();
        Tensor::new(shape, data).expect("consistent target shape")
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map(|s| s.image.shape()[0])
            .unwrap_or(1)
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<SampleBatch> {
        make_batch(self.split(split), indices, &self.spatial, self.num_labels)
    }
}

pub(crate) fn make_batch(
    samples: &[Sample],
    indices: &[usize],
    spatial: &[usize],
    num_labels: usize,
) -> Result<SampleBatch> {
    if indices.is_empty() {
        return Err(Error::invalid("batch", "no samples selected"));
    }
    let voxels: usize = spatial.iter().product();
    let classes = num_labels + 1;
    let channels = samples[indices[0]].image.shape()[0];
    let mut images = Vec::with_capacity(indices.len() * channels * voxels);
    let mut targets = vec![0.0; indices.len() * classes * voxels];
    let mut labels = Vec::with_capacity(indices.len() * voxels);
    for (b, &i) in indices.iter().enumerate() {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid("batch", format!("sample index {i} out of range")))?;
        images.extend_from_slice(s.image.data());
        for (v, &l) in s.labels.iter().enumerate() {
            targets[(b * classes + l as usize) * voxels + v] = 1.0;
        }
        labels.extend_from_slice(&s.labels);
    }
    let shape = |c: usize| {
        let mut s = vec![indices.len(), c];
        s.extend_from_slice(spatial);
        s
    };
    Ok(SampleBatch {
        images: Tensor::new(shape(channels), images)?,
        targets: Tensor::new(shape(classes), targets)?,
        labels,
    })
}
