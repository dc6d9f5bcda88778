use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::io::{self, DType};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// `train` or `test`.
    pub split: String,
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spatial: Vec<usize>,
    pub num_labels: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes every sample as an image and a label tensor plus `manifest.toml`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(dataset.train.len() + dataset.test.len());
    for (split, set) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (i, s) in set.iter().enumerate() {
            let entry = ManifestEntry {
                split: split.to_string(),
                image: format!("{split}_{i:05}_image.lutn"),
                labels: format!("{split}_{i:05}_labels.lutn"),
            };
            io::save(&dir.join(&entry.image), &s.image, DType::F64)?;
            let labels = Tensor::new(
                dataset.spatial.clone(),
                s.labels.iter().map(|&l| l as f64).collect(),
            )?;
            io::save(&dir.join(&entry.labels), &labels, DType::U8)?;
            samples.push(entry);
        }
    }
    let manifest = Manifest {
        spatial: dataset.spatial.clone(),
        num_labels: dataset.num_labels,
        samples,
    };
    fs::write(dir.join(MANIFEST), toml::to_string(&manifest)?)?;
    Ok(())
}

/// Reads a dataset written by [`save`]. Fails as a whole on any missing or
/// malformed file.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = toml::from_str(&fs::read_to_string(&manifest_path)?)?;
    let voxels: usize = manifest.spatial.iter().product();
    let mut dataset = Dataset {
        spatial: manifest.spatial.clone(),
        num_labels: manifest.num_labels,
        train: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.samples {
        let image = io::load(&dir.join(&entry.image))?;
        if image.rank() != manifest.spatial.len() + 1 || image.shape()[1..] != manifest.spatial[..]
        {
            return Err(Error::Format(format!(
                "{}: shape {:?} does not match spatial extents {:?}",
                entry.image,
                image.shape(),
                manifest.spatial
            )));
        }
        let labels = io::load(&dir.join(&entry.labels))?;
        if labels.numel() != voxels {
            return Err(Error::Format(format!(
                "{}: {} labels for {voxels} voxels",
                entry.labels,
                labels.numel()
            )));
        }
        let labels: Vec<u8> = labels.data().iter().map(|&v| v as u8).collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize > manifest.num_labels) {
            return Err(Error::Format(format!(
                "{}: label {bad} exceeds num_labels",
                entry.labels
            )));
        }
        let sample = Sample { image, labels };
        match entry.split.as_str() {
            "train" => dataset.train.push(sample),
            "test" => dataset.test.push(sample),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Format(
            "dataset needs at least one train and one test sample".into(),
        ));
    }
    Ok(dataset)
}
