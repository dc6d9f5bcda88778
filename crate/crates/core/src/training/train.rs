use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::metrics::{dice, DiceScore};
use crate::data::{make_batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::{Graph, LossKind, Tensor, Var};
use crate::pruning::{DropoutPlan, Removal};
use crate::unet::{ConvRef, UnetModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftDice,
    CrossEntropy,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::SoftDice => LossKind::SoftDice,
            Loss::CrossEntropy => LossKind::CrossEntropy,
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "soft_dice" | "dice" => Ok(Loss::SoftDice),
            "cross_entropy" | "ce" => Ok(Loss::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub seed: u64,
    /// Every op runs single-threaded in a fixed order; kept for config
    /// compatibility, there is no non-deterministic mode.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 30,
            loss: Loss::SoftDice,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_dice: f64,
    pub per_label: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub history: Vec<EpochRecord>,
    pub max_test_dice: f64,
    pub final_dice: f64,
    pub n_params_at_max: usize,
    /// Training hit a non-finite loss; `history` holds the epochs before it.
    pub aborted: bool,
}

impl RunResult {
    fn empty(n_params: usize) -> Self {
        Self {
            history: Vec::new(),
            max_test_dice: 0.0,
            final_dice: 0.0,
            n_params_at_max: n_params,
            aborted: false,
        }
    }

    fn record(&mut self, rec: EpochRecord, n_params: usize) {
        if self.history.is_empty() || rec.test_dice > self.max_test_dice {
            self.max_test_dice = rec.test_dice;
            self.n_params_at_max = n_params;
        }
        self.final_dice = rec.test_dice;
        self.history.push(rec);
    }
}

/// Label map per sample from head probabilities: threshold 0.5 for a
/// single sigmoid channel, channel argmax otherwise.
pub fn predict_labels(probs: &Tensor) -> Vec<u8> {
    let (b, c, s) = (probs.batch(), probs.channels(), probs.spatial_len());
    let d = probs.data();
    let mut out = Vec::with_capacity(b * s);
    for bi in 0..b {
        let base = bi * c * s;
        for p in 0..s {
            if c == 1 {
                out.push(u8::from(d[base + p] > 0.5));
            } else {
                let mut best = 0;
                for k in 1..c {
                    if d[base + k * s + p] > d[base + best * s + p] {
                        best = k;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

/// Mean per-sample Dice over `samples`.
pub fn evaluate(
    model: &UnetModel,
    samples: &[Sample],
    spatial: &[usize],
    num_labels: usize,
    batch_size: usize,
) -> Result<DiceScore> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let voxels: usize = spatial.iter().product();
    let mut per_label = vec![0.0; num_labels];
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(samples, chunk, spatial, num_labels)?;
        let probs = model.predict(&batch.images)?;
        if !probs.is_finite() {
            return Err(Error::NonFinite("evaluation"));
        }
        let pred = predict_labels(&probs);
        for k in 0..chunk.len() {
            let range = k * voxels..(k + 1) * voxels;
            let score = dice(&pred[range.clone()], &batch.labels[range], num_labels);
            for (acc, v) in per_label.iter_mut().zip(score.per_label) {
                *acc += v;
            }
        }
    }
    for v in &mut per_label {
        *v /= samples.len() as f64;
    }
    let mean = per_label.iter().sum::<f64>() / num_labels as f64;
    Ok(DiceScore { per_label, mean })
}

/// Channel dropout as a forward hook: each `(sample, channel)` plane is
/// zeroed with its plan probability and survivors are rescaled.
pub(crate) fn dropout_hook<'a>(
    plan: &'a DropoutPlan,
    rng: &'a mut ChaCha8Rng,
) -> impl FnMut(&mut Graph, ConvRef, Var) -> Result<Var> + 'a {
    move |g, conv, a| {
        let Some(probs) = plan.conv(conv) else {
            return Ok(a);
        };
        if probs.iter().all(|&p| p == 0.0) {
            return Ok(a);
        }
        let batch = g.value(a).batch();
        if g.value(a).channels() != probs.len() {
            return Err(Error::shape(
                "dropout",
                "channels",
                probs.len(),
                g.value(a).channels(),
            ));
        }
        let scales = (0..batch * probs.len())
            .map(|i| {
                let p = probs[i % probs.len()];
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        g.channel_scale(a, scales)
    }
}

/// Minibatch ADAM over a dataset, carrying optimizer state across calls.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A1E);
        Self {
            cfg,
            adam: AdamState::new(),
            rng,
        }
    }

    /// Keeps the moment estimates aligned after channel surgery.
    pub fn on_removal(&mut self, removal: &Removal) {
        self.adam.apply_edits(&removal.edits);
    }

    pub fn step(
        &mut self,
        model: &mut UnetModel,
        images: &Tensor,
        targets: &Tensor,
        dropout: Option<&DropoutPlan>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = match dropout {
            Some(plan) => {
                model.forward_with(&mut g, x, true, &mut dropout_hook(plan, &mut self.rng))?
            }
            None => model.forward(&mut g, x, true)?,
        };
        let t = g.leaf(targets.clone(), false);
        let loss = g.loss(pass.output, t, self.cfg.loss.into())?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = pass
            .params
            .iter()
            .map(|&p| g.take_grad(p).expect("parameter leaves require grad"))
            .collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = model.parameters_mut();
        adam_step(&mut params, &grad_refs, &mut self.adam, &self.cfg.adam());
        Ok(value)
    }

    /// One shuffled pass over the training split; returns the mean loss.
    pub fn train_epoch(
        &mut self,
        model: &mut UnetModel,
        data: &Dataset,
        dropout: Option<&DropoutPlan>,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = data.batch(Split::Train, chunk)?;
            total += self.step(model, &batch.images, &batch.head_targets(), dropout)?
                * chunk.len() as f64;
        }
        Ok(total / order.len() as f64)
    }
}

/// Trains for `cfg.epochs`, evaluating test Dice after every epoch.
///
/// A non-finite loss stops training and returns the partial history with
/// `aborted` set.
pub fn train(
    model: &mut UnetModel,
    data: &Dataset,
    cfg: &TrainConfig,
    dropout: Option<&DropoutPlan>,
) -> Result<RunResult> {
    cfg.validate()?;
    let n_params = model.num_parameters();
    let mut result = RunResult::empty(n_params);
    let mut trainer = Trainer::new(cfg.clone());
    for epoch in 1..=cfg.epochs {
        let loss = match trainer.train_epoch(model, data, dropout) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => {
                result.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let score = match evaluate(
            model,
            &data.test,
            &data.spatial,
            data.num_labels,
            cfg.batch_size,
        ) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => {
                result.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        result.record(
            EpochRecord {
                epoch,
                train_loss: loss,
                test_dice: score.mean,
                per_label: score.per_label,
            },
            n_params,
        );
    }
    Ok(result)
}
