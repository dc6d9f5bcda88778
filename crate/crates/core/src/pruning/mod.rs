//! Channel ranking, structured surgery, targeted dropout and the gradual
//! pruning loop.

mod criterion;
mod dropout;
mod log;
mod stamp;
mod strategy;
mod surgery;

pub use criterion::{compute_criterion, CriterionReport};
pub use dropout::{update_dropout, DropoutPlan, MAX_DROPOUT, TARGETED_FACTOR};
pub use log::{PruneEvent, PruneLog, Termination, SNAPSHOT_PCTS};
pub use stamp::{stamp_loop, PruneCallbacks, StampConfig};
pub use strategy::{select_victim, widest_conv, widest_schedule, Strategy};
pub use surgery::{remove_channel, Removal, TensorEdit};
