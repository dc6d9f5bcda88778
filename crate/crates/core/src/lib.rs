pub mod cli;
pub mod data;
pub mod error;
pub mod numerics;
pub mod pruning;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
