use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CriterionReport;
use crate::error::{Error, Result};
use crate::unet::{ArchSpec, BlockKind, ChannelId, ConvRef, UnetModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Lowest criterion value overall.
    Stamp,
    /// Random channel of the conv holding the lowest criterion value.
    StampLayerRandom,
    /// Random channel of the currently widest conv.
    WidestBlock,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Stamp,
        Strategy::StampLayerRandom,
        Strategy::WidestBlock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Stamp => "stamp",
            Strategy::StampLayerRandom => "stamp_layer_random",
            Strategy::WidestBlock => "widest_block",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "stamp" => Ok(Strategy::Stamp),
            "stamp_layer_random" => Ok(Strategy::StampLayerRandom),
            "widest_block" | "widest" => Ok(Strategy::WidestBlock),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Sort key for the widest-conv tie rule: deeper level first, then
/// encoder/bottleneck before decoder, then lower conv index.
fn tie_key(spec: &ArchSpec, c: ConvRef) -> (std::cmp::Reverse<usize>, bool, usize) {
    (
        std::cmp::Reverse(spec.level(c.block)),
        spec.block_kind(c.block) == BlockKind::Decoder,
        c.conv,
    )
}

/// The conv the widest-block rule shrinks next, or `None` when every conv
/// is down to one channel.
pub fn widest_conv(spec: &ArchSpec) -> Option<ConvRef> {
    spec.conv_refs()
        .filter(|&c| spec.width(c) >= 2)
        .min_by_key(|&c| (std::cmp::Reverse(spec.width(c)), tie_key(spec, c)))
}

pub fn select_victim(
    strategy: Strategy,
    report: Option<&CriterionReport>,
    model: &UnetModel,
    rng: &mut impl Rng,
) -> Result<ChannelId> {
    let spec = model.spec();
    match strategy {
        Strategy::WidestBlock => {
            let c = widest_conv(spec).ok_or(Error::Exhausted)?;
            Ok(ChannelId {
                block: c.block,
                conv: c.conv,
                channel: rng.gen_range(0..spec.width(c)),
            })
        }
        Strategy::Stamp | Strategy::StampLayerRandom => {
            let report = report
                .ok_or_else(|| Error::invalid("select_victim", "criterion report required"))?;
            let lowest = report
                .values
                .iter()
                .filter(|(id, _)| spec.width(id.conv_ref()) >= 2)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|&(id, _)| id)
                .ok_or(Error::Exhausted)?;
            if strategy == Strategy::Stamp {
                return Ok(lowest);
            }
            Ok(ChannelId {
                channel: rng.gen_range(0..spec.width(lowest.conv_ref())),
                ..lowest
            })
        }
    }
}

/// Width tables of the widest-block schedule: entry 0 is `spec.widths`,
/// entry `k` the widths after `k` removals.
pub fn widest_schedule(spec: &ArchSpec, total_removals: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    spec.validate()?;
    let counts = spec.count();
    let max = counts.n_channels - spec.num_convs();
    if total_removals > max {
        return Err(Error::invalid(
            "widest_schedule",
            format!("{total_removals} removals requested, at most {max} possible"),
        ));
    }
    let mut s = spec.clone();
    let mut out = Vec::with_capacity(total_removals + 1);
    out.push(s.widths.clone());
    for _ in 0..total_removals {
        let c = widest_conv(&s).expect("bounded by the removal limit");
        s.widths[c.block][c.conv] -= 1;
        out.push(s.widths.clone());
    }
    Ok(out)
}
