//! Synthetic context-dependent segmentation data.
//!
//! `Positional` draws several identical blobs per image and labels only the
//! one placed near the low end of the last spatial axis, so a voxel's label
//! cannot be decided from its appearance alone. `MultiOrgan` draws a chain
//! of touching structures with distinct intensities, one label each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
const BACKGROUND: f64 = 0.25;
const BLOB: f64 = 0.75;
const DISTRACTORS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Positional,
    MultiOrgan,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "positional" => Ok(ContextMode::Positional),
            "multi_organ" => Ok(ContextMode::MultiOrgan),
            other => Err(Error::Config(format!("unknown context mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dim: usize,
    pub side: usize,
    pub num_labels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub context_mode: ContextMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            side: 64,
            num_labels: 1,
            n_train: 200,
            n_test: 70,
            seed: 0,
            context_mode: ContextMode::Positional,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::Config(format!("dim {} must be 2 or 3", self.dim)));
        }
        if !self.side.is_power_of_two() || self.side < 8 {
            return Err(Error::Config(format!(
                "side {} must be a power of two >= 8",
                self.side
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        if self.num_labels == 0 || self.num_labels > 16 {
            return Err(Error::Config(format!(
                "num_labels {} outside 1..=16",
                self.num_labels
            )));
        }
        if self.context_mode == ContextMode::Positional && self.num_labels != 1 {
            return Err(Error::Config(
                "positional mode has exactly one label".into(),
            ));
        }
        Ok(())
    }
}

/// Mixes the run seed with a split and sample index.
fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed
        ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split: u64, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, i as u64));
                match spec.context_mode {
                    ContextMode::Positional => positional(spec, &mut rng),
                    ContextMode::MultiOrgan => multi_organ(spec, &mut rng),
                }
            })
            .collect()
    };
    Ok(Dataset {
        spatial: vec![spec.side; spec.dim],
        num_labels: spec.num_labels,
        train: make(1, spec.n_train),
        test: make(2, spec.n_test),
    })
}

struct Canvas {
    dim: usize,
    side: usize,
    intensity: Vec<f64>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(dim: usize, side: usize) -> Self {
        let n = side.pow(dim as u32);
        Self {
            dim,
            side,
            intensity: vec![BACKGROUND; n],
            labels: vec![0; n],
        }
    }

    fn coords(&self, mut idx: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for a in (0..self.dim).rev() {
            c[a] = (idx % self.side) as f64 + 0.5;
            idx /= self.side;
        }
        c
    }

    fn index(&self, c: &[f64]) -> usize {
        c.iter().fold(0, |acc, &v| {
            acc * self.side + (v.floor().max(0.0) as usize).min(self.side - 1)
        })
    }

    /// Paints an ellipsoid with per-axis radii.
    fn paint(&mut self, center: &[f64], radii: &[f64], value: f64, label: u8) {
        for i in 0..self.intensity.len() {
            let c = self.coords(i);
            let r2: f64 = c
                .iter()
                .zip(center)
                .zip(radii)
                .map(|((x, m), r)| ((x - m) / r).powi(2))
                .sum();
            if r2 <= 1.0 {
                self.intensity[i] = value;
                self.labels[i] = label;
            }
        }
        // A tiny structure still owns at least its center voxel.
        let at = self.index(center);
        self.intensity[at] = value;
        self.labels[at] = label;
    }

    fn finish(self, rng: &mut ChaCha8Rng) -> Sample {
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
        let data: Vec<f64> = self
            .intensity
            .iter()
            .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
            .collect();
        let mut shape = vec![1];
        shape.extend(std::iter::repeat_n(self.side, self.dim));
        Sample {
            image: Tensor::new(shape, data).expect("canvas shape"),
            labels: self.labels,
        }
    }
}

fn positional(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Sample {
    let side = spec.side as f64;
    let mut canvas = Canvas::new(spec.dim, spec.side);
    let radius = side * 0.1 * rng.gen_range(0.9..1.1);
    let last = spec.dim - 1;
    let free = |rng: &mut ChaCha8Rng| rng.gen_range(radius + 1.0..side - radius - 1.0);

    let mut target: Vec<f64> = (0..spec.dim).map(|_| free(rng)).collect();
    target[last] = rng.gen_range(radius + 1.0..side / 4.0);
    // Each distractor owns one band of the first axis, so they never touch.
    let band = side / DISTRACTORS as f64;
    let centers: Vec<Vec<f64>> = (0..DISTRACTORS)
        .map(|k| {
            let mut c: Vec<f64> = (0..spec.dim).map(|_| free(rng)).collect();
            let lo = k as f64 * band + radius + 0.5;
            c[0] = rng.gen_range(lo..lo + band - 2.0 * radius - 1.0);
            c[last] = rng.gen_range(side / 2.0 + 1.0..side - radius - 1.0);
            c
        })
        .collect();
    let radii = vec![radius; spec.dim];
    for c in &centers {
        canvas.paint(c, &radii, BLOB, 0);
    }
    canvas.paint(&target, &radii, BLOB, 1);
    canvas.finish(rng)
}

fn multi_organ(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Sample {
    let side = spec.side as f64;
    let n = spec.num_labels;
    let mut canvas = Canvas::new(spec.dim, spec.side);
    let mut radii: Vec<f64> = (0..n)
        .map(|_| side * 0.08 * rng.gen_range(0.85..1.15))
        .collect();
    let span: f64 = radii.iter().map(|r| 2.0 * r).sum();
    let room = side * 0.75;
    if span > room {
        for r in &mut radii {
            *r *= room / span;
        }
    }
    let span: f64 = radii.iter().map(|r| 2.0 * r).sum();
    let start = rng.gen_range(side * 0.1..(side * 0.9 - span).max(side * 0.1 + 1e-9));
    let mid = side / 2.0 + rng.gen_range(-0.05..0.05) * side;
    let mut pos = start;
    for (l, &r) in radii.iter().enumerate() {
        // Chain runs along the first spatial axis; others wobble around the middle.
        let mut center = vec![mid + rng.gen_range(-0.03..0.03) * side; spec.dim];
        center[0] = pos + r;
        pos += 2.0 * r;
        let value = 0.35 + 0.5 * l as f64 / (n.max(2) - 1) as f64;
        let mut axes = vec![r * rng.gen_range(1.2..1.6); spec.dim];
        axes[0] = r;
        canvas.paint(&center, &axes, value, (l + 1) as u8);
    }
    canvas.finish(rng)
}
