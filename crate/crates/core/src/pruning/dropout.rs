use serde::{Deserialize, Serialize};

use super::CriterionReport;
use crate::unet::{ArchSpec, ChannelId, ConvRef};

pub const MAX_DROPOUT: f64 = 0.5;
/// Probability multiplier for the lowest-ranked quarter of channels.
pub const TARGETED_FACTOR: f64 = 3.0;

/// Channel-wise dropout probabilities, indexed by block, conv and channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    probs: Vec<Vec<Vec<f64>>>,
}

impl DropoutPlan {
    pub fn uniform(spec: &ArchSpec, p: f64) -> Self {
        let p = p.clamp(0.0, MAX_DROPOUT);
        Self {
            probs: spec
                .widths
                .iter()
                .map(|b| b.iter().map(|&w| vec![p; w]).collect())
                .collect(),
        }
    }

    pub fn conv(&self, c: ConvRef) -> Option<&[f64]> {
        self.probs.get(c.block)?.get(c.conv).map(Vec::as_slice)
    }

    pub fn get(&self, id: ChannelId) -> Option<f64> {
        self.conv(id.conv_ref())?.get(id.channel).copied()
    }

    /// Drops the entry of a removed channel so indices follow the surgery.
    pub fn remove(&mut self, id: ChannelId) {
        if let Some(v) = self
            .probs
            .get_mut(id.block)
            .and_then(|b| b.get_mut(id.conv))
        {
            if id.channel < v.len() {
                v.remove(id.channel);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChannelId, f64)> + '_ {
        self.probs.iter().enumerate().flat_map(|(block, b)| {
            b.iter().enumerate().flat_map(move |(conv, c)| {
                c.iter().enumerate().map(move |(channel, &p)| {
                    (
                        ChannelId {
                            block,
                            conv,
                            channel,
                        },
                        p,
                    )
                })
            })
        })
    }
}

/// The lowest ⌈N/4⌉ channels by criterion (ties by `ChannelId`) get
/// `3·base_p`, everything else `base_p`, both capped at 0.5.
pub fn update_dropout(report: &CriterionReport, spec: &ArchSpec, base_p: f64) -> DropoutPlan {
    let base = base_p.clamp(0.0, MAX_DROPOUT);
    let high = (TARGETED_FACTOR * base).min(MAX_DROPOUT);
    let mut plan = DropoutPlan::uniform(spec, base);
    let mut ranked: Vec<(ChannelId, f64)> = report.values.clone();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let quartile = ranked.len().div_ceil(4);
    for (id, _) in ranked.into_iter().take(quartile) {
        if let Some(p) = plan
            .probs
            .get_mut(id.block)
            .and_then(|b| b.get_mut(id.conv))
            .and_then(|c| c.get_mut(id.channel))
        {
            *p = high;
        }
    }
    plan
}
