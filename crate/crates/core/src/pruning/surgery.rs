use crate::error::{Error, Result};
use crate::unet::{ChannelId, ConvRef, UnetModel};

/// Removal of `index` along `axis` of parameter `param` (an index into
/// [`UnetModel::parameters`] order, valid before the removal).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorEdit {
    pub param: usize,
    pub axis: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Removal {
    pub params_removed: usize,
    pub edits: Vec<TensorEdit>,
}

/// Deletes output channel `id` and every input slice that reads it.
///
/// The producing conv loses its filter, bias and norm terms; each consumer
/// (successor, pooled path, skip concat, upsampled concat or head) loses
/// the matching input slice.
pub fn remove_channel(model: &mut UnetModel, id: ChannelId) -> Result<Removal> {
    let c = id.conv_ref();
    let spec = model.spec();
    if c.block >= spec.num_blocks() || c.conv >= spec.convs_per_block || id.channel >= spec.width(c)
    {
        return Err(Error::NoSuchChannel(id));
    }
    if spec.width(c) < 2 {
        return Err(Error::LastChannel(id));
    }
    let consumers = spec.consumers(c);
    let per = model.tensors_per_conv();
    let base = model.param_offset(Some(c));
    let mut edits: Vec<TensorEdit> = (0..per)
        .map(|k| TensorEdit {
            param: base + k,
            axis: 0,
            index: id.channel,
        })
        .collect();

    let producer = model.conv(c);
    let kv = producer.weight.numel() / (producer.cout() * producer.cin());
    let mut removed = producer.cin() * kv + (per - 1);

    for k in &consumers {
        let weight = match k.target {
            Some(t) => &model.conv(t).weight,
            None => &model.head().weight,
        };
        removed += weight.numel() / weight.shape()[1];
        edits.push(TensorEdit {
            param: model.param_offset(k.target),
            axis: 1,
            index: k.offset + id.channel,
        });
    }

    apply(model, c, id.channel, &consumers)?;
    model.spec.widths[c.block][c.conv] -= 1;
    Ok(Removal {
        params_removed: removed,
        edits,
    })
}

fn apply(
    model: &mut UnetModel,
    c: ConvRef,
    channel: usize,
    consumers: &[crate::unet::Consumer],
) -> Result<()> {
    let p = model.conv_mut(c);
    p.weight.remove_index(0, channel)?;
    p.bias.remove_index(0, channel)?;
    if let Some((g, b)) = &mut p.norm {
        g.remove_index(0, channel)?;
        b.remove_index(0, channel)?;
    }
    for k in consumers {
        let w = match k.target {
            Some(t) => &mut model.conv_mut(t).weight,
            None => &mut model.head_mut().weight,
        };
        w.remove_index(1, k.offset + channel)?;
    }
    Ok(())
}
