use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::unet::{ArchSpec, ChannelId};

pub const SNAPSHOT_PCTS: [u32; 3] = [75, 50, 25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// 1-based; the model has lost `step` channels after this event.
    pub step: usize,
    pub id: ChannelId,
    pub strategy: Strategy,
    pub pct_remaining: f64,
    pub widths: Vec<Vec<usize>>,
    pub n_params: usize,
    pub dice: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every prunable conv is down to one channel.
    Exhausted,
    /// A stop condition or callback ended the run.
    Stopped,
    /// Training produced a non-finite value before this step completed.
    NonFinite { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub strategy: Strategy,
    pub initial: ArchSpec,
    pub initial_params: usize,
    /// Test Dice before the first removal, if measured.
    pub initial_dice: Option<f64>,
    pub events: Vec<PruneEvent>,
    pub termination: Termination,
}

impl PruneLog {
    pub fn new(strategy: Strategy, initial: ArchSpec) -> Self {
        let initial_params = initial.count().n_params;
        Self {
            strategy,
            initial,
            initial_params,
            initial_dice: None,
            events: Vec::new(),
            termination: Termination::Stopped,
        }
    }

    pub fn initial_channels(&self) -> usize {
        self.initial.count().n_channels
    }

    /// Number of channels left at `pct` percent remaining: ⌊pct·N/100⌋.
    pub fn target_channels(&self, pct: u32) -> usize {
        self.initial_channels() * pct as usize / 100
    }

    /// Architecture with ⌊pct·N/100⌋ channels left, if the run got there.
    pub fn snapshot(&self, pct: u32) -> Option<ArchSpec> {
        let n0 = self.initial_channels();
        let target = self.target_channels(pct);
        let widths = if target >= n0 {
            self.initial.widths.clone()
        } else {
            self.events.get(n0 - target - 1)?.widths.clone()
        };
        Some(ArchSpec {
            widths,
            ..self.initial.clone()
        })
    }

    /// Events whose channels-remaining fraction lies within `half_window` of `frac`.
    pub fn events_near(&self, frac: f64, half_window: f64) -> impl Iterator<Item = &PruneEvent> {
        self.events
            .iter()
            .filter(move |e| (e.pct_remaining - frac).abs() <= half_window + 1e-12)
    }

    /// Highest test Dice over the whole run, including the initial measurement.
    pub fn max_dice(&self) -> Option<f64> {
        self.initial_dice
            .into_iter()
            .chain(self.events.iter().filter_map(|e| e.dice))
            .max_by(f64::total_cmp)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("step,block,conv,channel,strategy,pct_channels_remaining,n_params,dice\n");
        for e in &self.events {
            let dice = e.dice.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.step,
                e.id.block,
                e.id.conv,
                e.id.channel,
                e.strategy,
                e.pct_remaining,
                e.n_params,
                dice
            );
        }
        s
    }

    /// One row per step (step 0 is the initial model), one column per conv.
    pub fn evolution_csv(&self) -> String {
        let spec = &self.initial;
        let mut s = String::from("step");
        for c in spec.conv_refs() {
            let _ = write!(
                s,
                ",{}{}_c{}",
                spec.block_kind(c.block).as_str(),
                spec.level(c.block),
                c.conv
            );
        }
        s.push('\n');
        let rows = std::iter::once((0, &spec.widths))
            .chain(self.events.iter().map(|e| (e.step, &e.widths)));
        for (step, widths) in rows {
            let _ = write!(s, "{step}");
            for w in widths.iter().flatten() {
                let _ = write!(s, ",{w}");
            }
            s.push('\n');
        }
        s
    }

    /// Per-conv widths at each requested percentage that the run reached.
    pub fn snapshots_csv(&self, pcts: &[u32]) -> String {
        let mut s = String::from("pct,block,kind,level,conv,width\n");
        for &pct in pcts {
            let Some(spec) = self.snapshot(pct) else {
                continue;
            };
            for c in spec.conv_refs() {
                let _ = writeln!(
                    s,
                    "{pct},{},{},{},{},{}",
                    c.block,
                    spec.block_kind(c.block).as_str(),
                    spec.level(c.block),
                    c.conv,
                    spec.width(c)
                );
            }
        }
        s
    }
}
