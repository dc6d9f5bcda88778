use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ArchSpec, BlockKind, ConvRef};
use crate::error::{Error, Result};
use crate::numerics::io::{self, DType};
use crate::numerics::{Graph, Tensor, Var};

/// Weights of one convolution, with optional instance-norm affine terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[Cout, Cin, k...]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<(Tensor, Tensor)>,
}

impl ConvParams {
    fn he_init(
        cout: usize,
        cin: usize,
        kernel: &[usize],
        norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        Self {
            weight: Tensor::from_fn(&shape, |_| normal.sample(rng)),
            bias: Tensor::zeros(&[cout]),
            norm: norm.then(|| (Tensor::ones(&[cout]), Tensor::zeros(&[cout]))),
        }
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some((g, b)) = &self.norm {
            v.push(g);
            v.push(b);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some((g, b)) = &mut self.norm {
            v.push(g);
            v.push(b);
        }
        v
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Per-voxel probabilities, `[B, head_channels, spatial...]`.
    pub output: Var,
    /// Leaves for every parameter, in [`UnetModel::parameters`] order.
    pub params: Vec<Var>,
    /// Post-activation output of every prunable conv, before any hook.
    pub activations: Vec<(ConvRef, Var)>,
}

/// Instantiated Unet. Owns its spec, which surgery keeps in sync with the
/// tensor shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct UnetModel {
    pub(crate) spec: ArchSpec,
    pub(crate) convs: Vec<Vec<ConvParams>>,
    pub(crate) head: ConvParams,
}

pub fn build(spec: &ArchSpec, seed: u64) -> Result<UnetModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = vec![spec.kernel; spec.dim];
    let convs = (0..spec.num_blocks())
        .map(|block| {
            (0..spec.convs_per_block)
                .map(|conv| {
                    let c = ConvRef { block, conv };
                    ConvParams::he_init(
                        spec.width(c),
                        spec.in_channels_of(c),
                        &kernel,
                        spec.norm,
                        &mut rng,
                    )
                })
                .collect()
        })
        .collect();
    let head = ConvParams::he_init(
        spec.head_channels(),
        spec.head_in_channels(),
        &vec![1; spec.dim],
        false,
        &mut rng,
    );
    Ok(UnetModel {
        spec: spec.clone(),
        convs,
        head,
    })
}

impl UnetModel {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn conv(&self, c: ConvRef) -> &ConvParams {
        &self.convs[c.block][c.conv]
    }

    pub(crate) fn conv_mut(&mut self, c: ConvRef) -> &mut ConvParams {
        &mut self.convs[c.block][c.conv]
    }

    pub fn head(&self) -> &ConvParams {
        &self.head
    }

    pub(crate) fn head_mut(&mut self) -> &mut ConvParams {
        &mut self.head
    }

    /// Tensors per conv, in parameter order.
    pub fn tensors_per_conv(&self) -> usize {
        if self.spec.norm {
            4
        } else {
            2
        }
    }

    /// Index in [`parameters`](Self::parameters) of the first tensor of `c`
    /// (`None` for the head).
    pub fn param_offset(&self, c: Option<ConvRef>) -> usize {
        let per = self.tensors_per_conv();
        match c {
            Some(c) => (c.block * self.spec.convs_per_block + c.conv) * per,
            None => self.spec.num_convs() * per,
        }
    }

    /// Every parameter tensor: per block and conv weight, bias (then norm
    /// gamma, beta), finally the head weight and bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .flatten()
            .chain(std::iter::once(&self.head))
            .flat_map(|c| c.tensors())
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|c| c.tensors_mut())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Runs the network on `input` (`[B, in_channels, spatial...]`).
    ///
    /// `hook` sees each prunable conv's post-activation output and may
    /// replace it (channel dropout, masking). Parameters are registered with
    /// `requires_grad = track_params`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        input: Var,
        track_params: bool,
        hook: &mut dyn FnMut(&mut Graph, ConvRef, Var) -> Result<Var>,
    ) -> Result<ForwardPass> {
        let spec = &self.spec;
        let x = g.value(input);
        if x.rank() != spec.dim + 2 {
            return Err(Error::shape("unet", "input rank", spec.dim + 2, x.rank()));
        }
        if x.channels() != spec.in_channels {
            return Err(Error::shape(
                "unet",
                "input channels",
                spec.in_channels,
                x.channels(),
            ));
        }
        spec.check_input(&x.shape()[2..])?;

        let mut params = Vec::new();
        let mut activations = Vec::with_capacity(spec.num_convs());
        let pad = (spec.kernel - 1) / 2;
        let mut skips = Vec::with_capacity(spec.levels - 1);
        let mut x = input;
        for block in 0..spec.num_blocks() {
            if spec.block_kind(block) == BlockKind::Decoder {
                let up = g.upsample2(x)?;
                x = g.concat_channels(skips[spec.level(block)], up)?;
            }
            for (conv, p) in self.convs[block].iter().enumerate() {
                let w = g.leaf(p.weight.clone(), track_params);
                let b = g.leaf(p.bias.clone(), track_params);
                params.extend([w, b]);
                let mut y = g.conv(x, w, b, 1, pad)?;
                if let Some((gamma, beta)) = &p.norm {
                    let gv = g.leaf(gamma.clone(), track_params);
                    let bv = g.leaf(beta.clone(), track_params);
                    params.extend([gv, bv]);
                    y = g.instance_norm(y, gv, bv)?;
                }
                let a = g.relu(y);
                let c = ConvRef { block, conv };
                activations.push((c, a));
                x = hook(g, c, a)?;
            }
            if spec.block_kind(block) == BlockKind::Encoder {
                skips.push(x);
                x = g.maxpool2(x)?;
            }
        }
        let w = g.leaf(self.head.weight.clone(), track_params);
        let b = g.leaf(self.head.bias.clone(), track_params);
        params.extend([w, b]);
        let logits = g.conv(x, w, b, 1, 0)?;
        let output = if spec.head_channels() == 1 {
            g.sigmoid(logits)
        } else {
            g.softmax_channels(logits)?
        };
        Ok(ForwardPass {
            output,
            params,
            activations,
        })
    }

    pub fn forward(&self, g: &mut Graph, input: Var, track_params: bool) -> Result<ForwardPass> {
        self.forward_with(g, input, track_params, &mut |_, _, a| Ok(a))
    }

    /// Probabilities for a batch without keeping the graph.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = self.forward(&mut g, x, false)?;
        Ok(g.value(pass.output).clone())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.spec.save(&dir.join("spec.toml"))?;
        for (i, t) in self.parameters().into_iter().enumerate() {
            io::save(&dir.join(format!("param_{i:03}.lutn")), t, DType::F64)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let spec = ArchSpec::load(&dir.join("spec.toml"))?;
        let mut model = build(&spec, 0)?;
        for (i, t) in model.parameters_mut().into_iter().enumerate() {
            let loaded = io::load(&dir.join(format!("param_{i:03}.lutn")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "param_{i:03} has shape {:?}, spec implies {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(model)
    }
}

/// Spec whose widths are read back from the model's current tensors.
pub fn extract_spec(model: &UnetModel) -> ArchSpec {
    let mut spec = model.spec.clone();
    for (b, block) in model.convs.iter().enumerate() {
        for (j, p) in block.iter().enumerate() {
            spec.widths[b][j] = p.cout();
        }
    }
    spec
}
