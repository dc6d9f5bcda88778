use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::unet::{ChannelId, UnetModel};

/// Normalized activation magnitude of every prunable channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    /// Sorted by `ChannelId`.
    pub values: Vec<(ChannelId, f64)>,
    pub batch_id: u64,
}

impl CriterionReport {
    pub fn get(&self, id: ChannelId) -> Option<f64> {
        self.values
            .binary_search_by(|(k, _)| k.cmp(&id))
            .ok()
            .map(|i| self.values[i].1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Each conv's values divided by their L2 norm over that conv, so a
    /// conv of N similar channels scores about 1/√N per channel.
    pub fn layer_normalized(&self) -> CriterionReport {
        let mut values = self.values.clone();
        let mut start = 0;
        while start < values.len() {
            let conv = values[start].0.conv_ref();
            let end = start
                + values[start..]
                    .iter()
                    .take_while(|(id, _)| id.conv_ref() == conv)
                    .count();
            let norm = values[start..end]
                .iter()
                .map(|(_, v)| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for (_, v) in &mut values[start..end] {
                    *v /= norm;
                }
            }
            start = end;
        }
        CriterionReport {
            values,
            batch_id: self.batch_id,
        }
    }
}

/// `‖a_c‖₂ / √M` for each channel's post-activation map `a_c` (M elements)
/// accumulated over all `batches`.
pub fn compute_criterion(
    model: &UnetModel,
    batches: &[Tensor],
    batch_id: u64,
) -> Result<CriterionReport> {
    if batches.is_empty() {
        return Err(Error::invalid("criterion", "empty batch list"));
    }
    let spec = model.spec();
    let mut sums: Vec<Vec<f64>> = spec.conv_refs().map(|c| vec![0.0; spec.width(c)]).collect();
    let mut counts = vec![0usize; sums.len()];
    for images in batches {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = model.forward(&mut g, x, false)?;
        for (k, (_, a)) in pass.activations.iter().enumerate() {
            let t = g.value(*a);
            let s = t.spatial_len();
            let ch = t.channels();
            for (i, v) in t.data().iter().enumerate() {
                sums[k][(i / s) % ch] += v * v;
            }
            counts[k] += t.batch() * s;
        }
    }
    let mut values = Vec::with_capacity(spec.count().n_channels);
    for (k, c) in spec.conv_refs().enumerate() {
        for (channel, &sq) in sums[k].iter().enumerate() {
            let v = (sq / counts[k] as f64).sqrt();
            if !v.is_finite() {
                return Err(Error::NonFinite("criterion activations"));
            }
            values.push((
                ChannelId {
                    block: c.block,
                    conv: c.conv,
                    channel,
                },
                v,
            ));
        }
    }
    Ok(CriterionReport { values, batch_id })
}
