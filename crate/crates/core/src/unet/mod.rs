//! Unet architecture description, construction and parameter accounting.

mod model;
mod spec;

pub use model::{build, extract_spec, ConvParams, ForwardPass, UnetModel};
pub use spec::{
    make_spec, ArchSpec, BlockKind, ChannelId, Consumer, ConsumerKind, ConvRef, Counts, Family,
    SpecParams,
};
