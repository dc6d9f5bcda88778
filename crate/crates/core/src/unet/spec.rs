use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel schedule family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Width doubles with every level: `n_f · 2^level`.
    Unet,
    /// Every conv has `n_f` channels.
    Lunet,
    /// The doubling schedule scaled by a percentage.
    Scaled,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Family::Unet),
            "lunet" => Ok(Family::Lunet),
            "scaled" => Ok(Family::Scaled),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Unet => "unet",
            Family::Lunet => "lunet",
            Family::Scaled => "scaled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKind {
    Encoder,
    Bottleneck,
    Decoder,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Encoder => "encoder",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::Decoder => "decoder",
        }
    }
}

/// One prunable convolution: conv `conv` of block `block`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConvRef {
    pub block: usize,
    pub conv: usize,
}

/// One output channel of a prunable convolution. Ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub block: usize,
    pub conv: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn conv_ref(self) -> ConvRef {
        ConvRef {
            block: self.block,
            conv: self.conv,
        }
    }
}

/// Where a conv's output is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsumerKind {
    /// Next conv in the same block.
    Successor,
    /// First conv of the next block after max pooling.
    Pooled,
    /// First conv of the decoder at the same level, first concat operand.
    Skip,
    /// First conv of the next decoder block after upsampling, second
    /// concat operand.
    Upsampled,
    /// The final label-producing 1×…×1 conv.
    Head,
}

/// A consumer of a conv's output, reading it at input-channel `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Consumer {
    pub kind: ConsumerKind,
    /// `None` for the head.
    pub target: Option<ConvRef>,
    pub offset: usize,
}

/// Parameter and channel totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_params: usize,
    pub n_channels: usize,
}

/// Declarative Unet architecture.
///
/// Blocks are numbered in forward order: `levels - 1` encoder blocks,
/// the bottleneck, then `levels - 1` decoder blocks. Decoder block `b`
/// sits at level `2·(levels-1) - b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub levels: usize,
    pub convs_per_block: usize,
    pub dim: usize,
    pub in_channels: usize,
    /// Foreground labels. One label uses a sigmoid head with one output
    /// channel; more use a softmax head with a background channel.
    pub num_labels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub norm: bool,
    pub widths: Vec<Vec<usize>>,
}

/// Inputs to [`make_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecParams {
    pub family: Family,
    pub n_f: usize,
    pub levels: usize,
    pub convs_per_block: usize,
    pub dim: usize,
    pub in_channels: usize,
    pub num_labels: usize,
    pub scale_percent: Option<f64>,
    pub kernel: usize,
    pub norm: bool,
}

impl Default for SpecParams {
    fn default() -> Self {
        Self {
            family: Family::Unet,
            n_f: 4,
            levels: 5,
            convs_per_block: 2,
            dim: 2,
            in_channels: 1,
            num_labels: 1,
            scale_percent: None,
            kernel: 3,
            norm: false,
        }
    }
}

pub fn make_spec(p: &SpecParams) -> Result<ArchSpec> {
    if p.n_f == 0 {
        return Err(Error::InvalidSpec("n_f must be at least 1".into()));
    }
    if p.levels < 2 {
        return Err(Error::InvalidSpec("levels must be at least 2".into()));
    }
    let scale = match (p.family, p.scale_percent) {
        (Family::Scaled, Some(s)) if s > 0.0 && s <= 100.0 => s / 100.0,
        (Family::Scaled, Some(s)) => {
            return Err(Error::InvalidSpec(format!(
                "scale_percent {s} outside (0, 100]"
            )))
        }
        (Family::Scaled, None) => {
            return Err(Error::InvalidSpec(
                "scaled family needs scale_percent".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::InvalidSpec(format!(
                "scale_percent only applies to the scaled family, not {}",
                p.family
            )))
        }
        (_, None) => 1.0,
    };
    let width_at = |level: usize| -> usize {
        match p.family {
            Family::Lunet => p.n_f,
            Family::Unet => p.n_f << level,
            Family::Scaled => (((p.n_f << level) as f64 * scale).round() as usize).max(1),
        }
    };
    let blocks = 2 * p.levels - 1;
    let widths = (0..blocks)
        .map(|b| vec![width_at(level_of(p.levels, b)); p.convs_per_block])
        .collect();
    let spec = ArchSpec {
        levels: p.levels,
        convs_per_block: p.convs_per_block,
        dim: p.dim,
        in_channels: p.in_channels,
        num_labels: p.num_labels,
        kernel: p.kernel,
        norm: p.norm,
        widths,
    };
    spec.validate()?;
    Ok(spec)
}

fn level_of(levels: usize, block: usize) -> usize {
    if block < levels {
        block
    } else {
        2 * (levels - 1) - block
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.levels < 2 {
            return fail(format!("levels = {} (need >= 2)", self.levels));
        }
        if !(2..=3).contains(&self.dim) {
            return fail(format!("dim = {} (need 2 or 3)", self.dim));
        }
        if self.convs_per_block == 0 {
            return fail("convs_per_block must be positive".into());
        }
        if self.in_channels == 0 || self.num_labels == 0 {
            return fail("in_channels and num_labels must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.widths.len() != self.num_blocks() {
            return fail(format!(
                "{} width lists for {} blocks",
                self.widths.len(),
                self.num_blocks()
            ));
        }
        for (b, ws) in self.widths.iter().enumerate() {
            if ws.len() != self.convs_per_block {
                return fail(format!(
                    "block {b} has {} widths, expected {}",
                    ws.len(),
                    self.convs_per_block
                ));
            }
            if ws.contains(&0) {
                return fail(format!("block {b} has a zero width"));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.levels - 1
    }

    pub fn bottleneck(&self) -> usize {
        self.levels - 1
    }

    pub fn block_kind(&self, block: usize) -> BlockKind {
        use std::cmp::Ordering::*;
        match block.cmp(&self.bottleneck()) {
            Less => BlockKind::Encoder,
            Equal => BlockKind::Bottleneck,
            Greater => BlockKind::Decoder,
        }
    }

    /// Resolution level, 0 at full resolution.
    pub fn level(&self, block: usize) -> usize {
        level_of(self.levels, block)
    }

    /// Encoder block at `level` (the bottleneck for the deepest level).
    pub fn encoder_at(&self, level: usize) -> usize {
        level
    }

    pub fn width(&self, c: ConvRef) -> usize {
        self.widths[c.block][c.conv]
    }

    /// Width of a block's last conv, i.e. the channels it hands on.
    pub fn block_output(&self, block: usize) -> usize {
        *self.widths[block]
            .last()
            .expect("validated: non-empty block")
    }

    /// Output channels of the head.
    pub fn head_channels(&self) -> usize {
        if self.num_labels == 1 {
            1
        } else {
            self.num_labels + 1
        }
    }

    pub fn conv_refs(&self) -> impl Iterator<Item = ConvRef> + '_ {
        (0..self.num_blocks()).flat_map(move |block| {
            (0..self.convs_per_block).map(move |conv| ConvRef { block, conv })
        })
    }

    pub fn num_convs(&self) -> usize {
        self.num_blocks() * self.convs_per_block
    }

    /// Input channels of a prunable conv.
    pub fn in_channels_of(&self, c: ConvRef) -> usize {
        if c.conv > 0 {
            return self.widths[c.block][c.conv - 1];
        }
        match self.block_kind(c.block) {
            BlockKind::Encoder if c.block == 0 => self.in_channels,
            BlockKind::Encoder | BlockKind::Bottleneck => self.block_output(c.block - 1),
            BlockKind::Decoder => {
                self.block_output(self.encoder_at(self.level(c.block)))
                    + self.block_output(c.block - 1)
            }
        }
    }

    pub fn head_in_channels(&self) -> usize {
        self.block_output(self.num_blocks() - 1)
    }

    /// Every conv that reads the output of `c`, with the input-channel
    /// offset at which it does so.
    pub fn consumers(&self, c: ConvRef) -> Vec<Consumer> {
        let last = self.convs_per_block - 1;
        if c.conv < last {
            return vec![Consumer {
                kind: ConsumerKind::Successor,
                target: Some(ConvRef {
                    block: c.block,
                    conv: c.conv + 1,
                }),
                offset: 0,
            }];
        }
        let next = ConvRef {
            block: c.block + 1,
            conv: 0,
        };
        match self.block_kind(c.block) {
            BlockKind::Encoder => {
                let decoder = self.num_blocks() - 1 - c.block;
                vec![
                    Consumer {
                        kind: ConsumerKind::Pooled,
                        target: Some(next),
                        offset: 0,
                    },
                    Consumer {
                        kind: ConsumerKind::Skip,
                        target: Some(ConvRef {
                            block: decoder,
                            conv: 0,
                        }),
                        offset: 0,
                    },
                ]
            }
            _ if c.block + 1 == self.num_blocks() => vec![Consumer {
                kind: ConsumerKind::Head,
                target: None,
                offset: 0,
            }],
            _ => {
                let skip = self.block_output(self.encoder_at(self.level(next.block)));
                vec![Consumer {
                    kind: ConsumerKind::Upsampled,
                    target: Some(next),
                    offset: skip,
                }]
            }
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.pow(self.dim as u32)
    }

    /// Parameters of a conv with the given channel counts.
    pub(crate) fn conv_params(
        &self,
        cin: usize,
        cout: usize,
        kernel_volume: usize,
        norm: bool,
    ) -> usize {
        cin * cout * kernel_volume + cout + if norm { 2 * cout } else { 0 }
    }

    pub fn count(&self) -> Counts {
        let kv = self.kernel_volume();
        let body: usize = self
            .conv_refs()
            .map(|c| self.conv_params(self.in_channels_of(c), self.width(c), kv, self.norm))
            .sum();
        let head = self.conv_params(self.head_in_channels(), self.head_channels(), 1, false);
        Counts {
            n_params: body + head,
            n_channels: self.widths.iter().flatten().sum(),
        }
    }

    /// Sum of conv widths per block.
    pub fn block_channels(&self) -> Vec<usize> {
        self.widths.iter().map(|w| w.iter().sum()).collect()
    }

    /// Spatial input extents must survive `levels - 1` halvings.
    pub fn check_input(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.dim {
            return Err(Error::shape(
                "unet",
                "spatial rank",
                self.dim,
                spatial.len(),
            ));
        }
        let factor = 1usize << (self.levels - 1);
        for (axis, &e) in spatial.iter().enumerate() {
            if e % factor != 0 {
                return Err(Error::InvalidSpec(format!(
                    "spatial axis {axis} extent {e} is not divisible by {factor}"
                )));
            }
        }
        Ok(())
    }

    /// True when every prunable conv has the same width.
    pub fn is_flat(&self) -> bool {
        let mut it = self.widths.iter().flatten();
        let first = it.next();
        it.all(|w| Some(w) == first)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ArchSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(family: Family, n_f: usize, levels: usize) -> SpecParams {
        SpecParams {
            family,
            n_f,
            levels,
            ..SpecParams::default()
        }
    }

    fn harp(family: Family, n_f: usize) -> ArchSpec {
        make_spec(&SpecParams {
            dim: 3,
            ..params(family, n_f, 5)
        })
        .unwrap()
    }

    #[test]
    fn doubling_widths() {
        let s = make_spec(&params(Family::Unet, 4, 5)).unwrap();
        let firsts: Vec<usize> = s.widths.iter().map(|w| w[0]).collect();
        assert_eq!(firsts, vec![4, 8, 16, 32, 64, 32, 16, 8, 4]);
        assert_eq!(s.widths[4], vec![64, 64]);
    }

    #[test]
    fn lunet_is_flat() {
        let s = make_spec(&params(Family::Lunet, 4, 5)).unwrap();
        assert!(s.widths.iter().flatten().all(|&w| w == 4));
        assert!(s.is_flat());
    }

    #[test]
    fn scaled_half() {
        let s = make_spec(&SpecParams {
            scale_percent: Some(50.0),
            ..params(Family::Scaled, 4, 5)
        })
        .unwrap();
        let firsts: Vec<usize> = s.widths[..5].iter().map(|w| w[0]).collect();
        assert_eq!(firsts, vec![2, 4, 8, 16, 32]);
        // never below one channel
        let s = make_spec(&SpecParams {
            scale_percent: Some(1.0),
            ..params(Family::Scaled, 4, 3)
        })
        .unwrap();
        assert!(s.widths.iter().flatten().all(|&w| w >= 1));
    }

    #[test]
    fn invalid_combinations() {
        assert!(make_spec(&params(Family::Scaled, 4, 5)).is_err());
        assert!(make_spec(&SpecParams {
            scale_percent: Some(50.0),
            ..params(Family::Unet, 4, 5)
        })
        .is_err());
        assert!(make_spec(&SpecParams {
            scale_percent: Some(150.0),
            ..params(Family::Scaled, 4, 5)
        })
        .is_err());
        assert!(make_spec(&params(Family::Unet, 0, 5)).is_err());
        assert!(make_spec(&params(Family::Unet, 4, 1)).is_err());
        assert!(make_spec(&SpecParams {
            kernel: 2,
            ..params(Family::Unet, 4, 3)
        })
        .is_err());
    }

    #[test]
    fn single_conv_count() {
        // A lone 1→1 3×3 conv: 9 weights and one bias.
        let s = ArchSpec {
            levels: 2,
            convs_per_block: 1,
            dim: 2,
            in_channels: 1,
            num_labels: 1,
            kernel: 3,
            norm: false,
            widths: vec![vec![1]; 3],
        };
        assert_eq!(s.conv_params(1, 1, s.kernel_volume(), false), 10);
    }

    #[test]
    fn harp_counts() {
        let unet = harp(Family::Unet, 4).count();
        let lunet = harp(Family::Lunet, 4).count();
        let rel = (unet.n_params as f64 - 354_000.0).abs() / 354_000.0;
        assert!(rel < 0.15, "unet n_params {}", unet.n_params);
        assert!(unet.n_params > 33 * lunet.n_params);
        assert_eq!(unet.n_params, 368_113);
        assert_eq!(lunet.n_params, 9_257);
        assert_eq!(unet.n_channels, 2 * (4 + 8 + 16 + 32) * 2 + 2 * 64);
    }

    #[test]
    fn in_channels_and_consumers_agree() {
        let s = harp(Family::Unet, 4);
        // every conv's input equals the sum of the producer widths it reads
        let mut fed = std::collections::HashMap::<ConvRef, usize>::new();
        let mut head = 0;
        for c in s.conv_refs() {
            for k in s.consumers(c) {
                match k.target {
                    Some(t) => *fed.entry(t).or_default() += s.width(c),
                    None => head += s.width(c),
                }
            }
        }
        for c in s.conv_refs() {
            let want = s.in_channels_of(c);
            let got = fed.get(&c).copied().unwrap_or(s.in_channels);
            assert_eq!(got, want, "{c:?}");
        }
        assert_eq!(head, s.head_in_channels());
    }

    #[test]
    fn toml_round_trip() {
        let s = harp(Family::Lunet, 2);
        assert_eq!(ArchSpec::from_toml(&s.to_toml().unwrap()).unwrap(), s);
    }

    #[test]
    fn input_divisibility() {
        let s = make_spec(&params(Family::Lunet, 2, 4)).unwrap();
        assert!(s.check_input(&[32, 32]).is_ok());
        assert!(s.check_input(&[36, 32]).is_err());
        assert!(s.check_input(&[32, 32, 32]).is_err());
    }
}
