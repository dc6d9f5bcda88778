use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, generate, ContextMode, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::pruning::{StampConfig, Strategy};
use crate::training::TrainConfig;
use crate::unet::{make_spec, ArchSpec, Family, SpecParams};

pub const PROFILES: [&str; 3] = ["harp200", "harp50", "synthetic-default"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory written by `gen-data`; when set, `synth` is ignored.
    pub path: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthSpec {
                side: 32,
                n_train: 48,
                n_test: 16,
                ..SynthSpec::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub strategy: Strategy,
    pub recovery_epochs: usize,
    pub warmup_epochs: usize,
    pub base_p: f64,
    pub criterion_batches: usize,
    /// Stop once this percentage of channels or fewer remains.
    pub stop_at_pct: Option<u32>,
    /// Write the criterion distribution when this percentage is reached.
    pub histogram_pct: Option<u32>,
    /// Rank channels by layer-normalized criterion values (off: raw values).
    pub layer_normalize: bool,
    pub svg: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Stamp,
            recovery_epochs: 1,
            warmup_epochs: 0,
            base_p: 0.05,
            criterion_batches: 4,
            stop_at_pct: None,
            histogram_pct: Some(50),
            layer_normalize: true,
            svg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: SpecParams,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        profile("synthetic-default").expect("built-in profile")
    }
}

/// Built-in configurations. The HarP rows keep the HarP hyper-parameters
/// and use synthetic stand-in data of the same size.
pub fn profile(name: &str) -> Result<ExperimentConfig> {
    let harp = |n_train, n_test| ExperimentConfig {
        name: name.to_string(),
        data: DataConfig {
            path: None,
            synth: SynthSpec {
                dim: 3,
                side: 64,
                num_labels: 1,
                n_train,
                n_test,
                seed: 0,
                context_mode: ContextMode::Positional,
            },
        },
        model: SpecParams {
            family: Family::Unet,
            n_f: 4,
            levels: 5,
            convs_per_block: 2,
            dim: 3,
            norm: true,
            ..SpecParams::default()
        },
        train: TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 30,
            ..TrainConfig::default()
        },
        prune: PruneConfig {
            recovery_epochs: 5,
            ..PruneConfig::default()
        },
        seeds: vec![1, 2, 3],
        out_dir: PathBuf::from("out"),
    };
    match name {
        "harp200" => Ok(harp(200, 70)),
        "harp50" => Ok(harp(50, 220)),
        "synthetic-default" => Ok(ExperimentConfig {
            name: name.to_string(),
            data: DataConfig::default(),
            model: SpecParams {
                family: Family::Unet,
                n_f: 4,
                levels: 4,
                convs_per_block: 2,
                dim: 2,
                norm: true,
                ..SpecParams::default()
            },
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 8,
                epochs: 20,
                ..TrainConfig::default()
            },
            prune: PruneConfig::default(),
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("out"),
        }),
        other => Err(Error::Config(format!(
            "unknown profile {other:?}; expected one of {}",
            PROFILES.join(", ")
        ))),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config(format!(
                "seeds {:?} are not distinct",
                self.seeds
            )));
        }
        match &self.data.path {
            Some(p) if !p.join("manifest.toml").is_file() => {
                return Err(Error::MissingFile(p.join("manifest.toml")))
            }
            Some(_) => {}
            None => self.data.synth.validate()?,
        }
        self.train.validate()?;
        if !(0.0..=0.5).contains(&self.prune.base_p) {
            return Err(Error::Config(format!(
                "base_p {} outside [0, 0.5]",
                self.prune.base_p
            )));
        }
        for pct in [self.prune.stop_at_pct, self.prune.histogram_pct]
            .into_iter()
            .flatten()
        {
            if pct > 100 {
                return Err(Error::Config(format!("percentage {pct} above 100")));
            }
        }
        make_spec(&self.model)?;
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => data::load(p),
            None => generate(&self.data.synth),
        }
    }

    /// The architecture, with input channels, labels and dimensionality
    /// taken from the dataset.
    pub fn arch_for(&self, data: &Dataset) -> Result<ArchSpec> {
        make_spec(&SpecParams {
            dim: data.spatial.len(),
            in_channels: data.in_channels(),
            num_labels: data.num_labels,
            ..self.model.clone()
        })
    }

    /// Short identifier of the model, used in directory names and reports.
    pub fn model_label(&self) -> String {
        let m = &self.model;
        match (m.family, m.scale_percent) {
            (Family::Scaled, Some(p)) => format!("unet{p}pct_nf{}", m.n_f),
            (f, _) => format!("{f}_nf{}", m.n_f),
        }
    }

    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn stamp_for_seed(&self, seed: u64) -> StampConfig {
        let p = &self.prune;
        StampConfig {
            strategy: p.strategy,
            recovery_epochs: p.recovery_epochs,
            warmup_epochs: p.warmup_epochs,
            base_p: p.base_p,
            criterion_batches: p.criterion_batches,
            stop_at_fraction: p.stop_at_pct.map(|x| x as f64 / 100.0),
            max_steps: None,
            layer_normalize: p.layer_normalize,
            evaluate: true,
            train: self.train_for_seed(seed),
        }
    }
}
