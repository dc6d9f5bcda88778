use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_criterion, remove_channel, select_victim, update_dropout, CriterionReport, DropoutPlan,
    PruneEvent, PruneLog, Strategy, Termination,
};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::{evaluate, TrainConfig, Trainer};
use crate::unet::{ChannelId, UnetModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StampConfig {
    pub strategy: Strategy,
    pub recovery_epochs: usize,
    /// Training epochs before the first removal.
    pub warmup_epochs: usize,
    pub base_p: f64,
    /// Batches of training data used to rank channels.
    pub criterion_batches: usize,
    /// Stop once this fraction of channels or fewer remains.
    pub stop_at_fraction: Option<f64>,
    pub max_steps: Option<usize>,
    /// Rank by [`CriterionReport::layer_normalized`] values, so channels of
    /// wide convs score lower. Off ranks by the raw statistic.
    pub layer_normalize: bool,
    pub evaluate: bool,
    pub train: TrainConfig,
}

impl Default for StampConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Stamp,
            recovery_epochs: 1,
            warmup_epochs: 0,
            base_p: 0.05,
            criterion_batches: 4,
            stop_at_fraction: None,
            max_steps: None,
            layer_normalize: true,
            evaluate: true,
            train: TrainConfig::default(),
        }
    }
}

/// Hooks into [`stamp_loop`]; every method has a no-op default.
pub trait PruneCallbacks {
    fn on_criterion(&mut self, _step: usize, _report: &CriterionReport, _model: &UnetModel) {}
    fn on_event(&mut self, _event: &PruneEvent, _model: &UnetModel) {}
    /// Returning true ends the run before step `next_step` starts.
    fn should_stop(&mut self, _next_step: usize) -> bool {
        false
    }
}

impl PruneCallbacks for () {}

impl CriterionReport {
    /// The report with `id` dropped and later channels of its conv shifted down.
    pub fn without(&self, id: ChannelId) -> CriterionReport {
        let values = self
            .values
            .iter()
            .filter(|(k, _)| *k != id)
            .map(|&(k, v)| {
                if k.conv_ref() == id.conv_ref() && k.channel > id.channel {
                    (
                        ChannelId {
                            channel: k.channel - 1,
                            ..k
                        },
                        v,
                    )
                } else {
                    (k, v)
                }
            })
            .collect();
        CriterionReport {
            values,
            batch_id: self.batch_id,
        }
    }
}

fn criterion_images(data: &Dataset, cfg: &StampConfig) -> Result<Vec<Tensor>> {
    let n = data
        .train
        .len()
        .min(cfg.criterion_batches.max(1) * cfg.train.batch_size);
    let indices: Vec<usize> = (0..n).collect();
    indices
        .chunks(cfg.train.batch_size)
        .map(|c| data.batch(Split::Train, c).map(|b| b.images))
        .collect()
}

fn train_epochs(
    trainer: &mut Trainer,
    model: &mut UnetModel,
    data: &Dataset,
    epochs: usize,
    plan: &DropoutPlan,
) -> Result<()> {
    for _ in 0..epochs {
        trainer.train_epoch(model, data, Some(plan))?;
    }
    Ok(())
}

/// Gradual pruning: recovery training, ranking, one removal and a dropout
/// update per step until every prunable conv has a single channel.
pub fn stamp_loop(
    model: &mut UnetModel,
    data: &Dataset,
    cfg: &StampConfig,
    callbacks: &mut dyn PruneCallbacks,
) -> Result<PruneLog> {
    cfg.train.validate()?;
    if !(0.0..=0.5).contains(&cfg.base_p) {
        return Err(Error::Config(format!(
            "base_p {} outside [0, 0.5]",
            cfg.base_p
        )));
    }
    let mut log = PruneLog::new(cfg.strategy, model.spec().clone());
    let n0 = log.initial_channels();
    let mut trainer = Trainer::new(cfg.train.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x912E_5EED);
    let probe = criterion_images(data, cfg)?;
    let eval = |m: &UnetModel| {
        evaluate(
            m,
            &data.test,
            &data.spatial,
            data.num_labels,
            cfg.train.batch_size,
        )
    };

    let mut plan = DropoutPlan::uniform(model.spec(), cfg.base_p);
    if cfg.warmup_epochs > 0 {
        if let Err(e) = train_epochs(&mut trainer, model, data, cfg.warmup_epochs, &plan) {
            return terminal(log, e, 0);
        }
        if cfg.evaluate {
            log.initial_dice = Some(eval(model)?.mean);
        }
    }
    if super::widest_conv(model.spec()).is_none() {
        log.termination = Termination::Exhausted;
        return Ok(log);
    }
    let rank = |m: &UnetModel, batch_id| {
        compute_criterion(m, &probe, batch_id).map(|r| {
            if cfg.layer_normalize {
                r.layer_normalized()
            } else {
                r
            }
        })
    };
    let mut report = match rank(model, 0) {
        Ok(r) => r,
        Err(e) => return terminal(log, e, 1),
    };
    plan = update_dropout(&report, model.spec(), cfg.base_p);

    let mut step = 0;
    loop {
        let remaining = (n0 - step) as f64 / n0 as f64;
        let stop = cfg.max_steps.is_some_and(|m| step >= m)
            || cfg.stop_at_fraction.is_some_and(|f| remaining <= f)
            || callbacks.should_stop(step + 1);
        if stop {
            log.termination = Termination::Stopped;
            break;
        }
        if super::widest_conv(model.spec()).is_none() {
            log.termination = Termination::Exhausted;
            break;
        }
        if let Err(e) = train_epochs(&mut trainer, model, data, cfg.recovery_epochs, &plan) {
            return terminal(log, e, step + 1);
        }
        report = match rank(model, step as u64 + 1) {
            Ok(r) => r,
            Err(e) => return terminal(log, e, step + 1),
        };
        callbacks.on_criterion(step + 1, &report, model);
        let victim = select_victim(cfg.strategy, Some(&report), model, &mut rng)?;
        let removal = remove_channel(model, victim)?;
        trainer.on_removal(&removal);
        report = report.without(victim);
        plan = update_dropout(&report, model.spec(), cfg.base_p);
        step += 1;

        let dice = if cfg.evaluate {
            match eval(model) {
                Ok(s) => Some(s.mean),
                Err(e) => return terminal(log, e, step),
            }
        } else {
            None
        };
        let event = PruneEvent {
            step,
            id: victim,
            strategy: cfg.strategy,
            pct_remaining: (n0 - step) as f64 / n0 as f64,
            widths: model.spec().widths.clone(),
            n_params: model.num_parameters(),
            dice,
        };
        callbacks.on_event(&event, model);
        log.events.push(event);
    }
    Ok(log)
}

fn terminal(mut log: PruneLog, e: Error, step: usize) -> Result<PruneLog> {
    match e {
        Error::NonFinite(_) => {
            log.termination = Termination::NonFinite { step };
            Ok(log)
        }
        e => Err(e),
    }
}
