//! ADAM, Dice, seed aggregation and the train/evaluate loops.

mod adam;
mod metrics;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{aggregate, dice, median, DiceScore, Summary};
pub use train::{
    evaluate, predict_labels, train, EpochRecord, Loss, RunResult, TrainConfig, Trainer,
};
