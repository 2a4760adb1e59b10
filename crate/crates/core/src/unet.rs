//! Topology planning and the three 3D U-Net variants.
//!
//! All variants share one [`NetworkTopology`]: per-axis strides, a feature
//! schedule doubling up to a cap, and residual block counts. They differ only
//! in what sits inside each encoder stage and decoder step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{contract, ensure, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{halving_weights, SupervisionHead};
use crate::math;
use crate::optim::Parameter;
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_FEATURES: usize = 320;
/// Smallest spatial extent any axis may be reduced to.
pub const MIN_EXTENT: usize = 4;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkVariant {
    Plain,
    Residual,
    PreActResidual,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 3] = [Self::Plain, Self::Residual, Self::PreActResidual];

    /// Negative slope of the nonlinearity: LReLU for plain, ReLU otherwise.
    pub fn negative_slope(self) -> f64 {
        match self {
            Self::Plain => LEAKY_SLOPE,
            Self::Residual | Self::PreActResidual => 0.0,
        }
    }

    /// Feature maps at full resolution used at full scale.
    pub fn default_base_features(self) -> usize {
        match self {
            Self::Plain => 30,
            Self::Residual | Self::PreActResidual => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Residual => "residual",
            Self::PreActResidual => "preact",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Plain => 0,
            Self::Residual => 1,
            Self::PreActResidual => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| contract!("unknown network variant code {}", code))
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "residual" => Ok(Self::Residual),
            "preact" | "pre-activation" | "preact-residual" => Ok(Self::PreActResidual),
            other => Err(contract!(
                "unknown network variant {:?} (expected plain, residual or preact)",
                other
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Stage {
    pub stride: [usize; 3],
    pub features: usize,
    pub encoder_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkTopology {
    pub patch_size: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_features: usize,
    pub max_features: usize,
    pub stages: Vec<Stage>,
}

/// Halves each axis independently while the result stays at least
/// [`MIN_EXTENT`], one stage per halving step.
pub fn plan_topology(patch_size: [usize; 3], base_features: usize, num_classes: usize) -> Result<NetworkTopology> {
    if patch_size.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::InvalidPatch(format!(
            "patch {:?} has an axis below {}",
            patch_size, MIN_EXTENT
        )));
    }
    ensure!(base_features > 0, "base_features must be positive");
    ensure!(num_classes >= 2, "need at least two classes, got {}", num_classes);
    let mut extents = patch_size;
    let mut strides = vec![[1, 1, 1]];
    loop {
        let mut stride = [1; 3];
        for (s, e) in stride.iter_mut().zip(extents.iter_mut()) {
            if *e / 2 >= MIN_EXTENT {
                if *e % 2 != 0 {
                    return Err(Error::InvalidPatch(format!(
                        "patch {:?} reaches odd extent {} on an axis that must halve",
                        patch_size, e
                    )));
                }
                *s = 2;
                *e /= 2;
            }
        }
        if stride == [1, 1, 1] {
            break;
        }
        strides.push(stride);
    }
    let stages = strides
        .into_iter()
        .enumerate()
        .map(|(i, stride)| Stage {
            stride,
            features: base_features
                .checked_shl(i as u32)
                .filter(|&f| f >> i == base_features)
                .map_or(MAX_FEATURES, |f| f.min(MAX_FEATURES)),
            encoder_blocks: i + 1,
        })
        .collect();
    Ok(NetworkTopology {
        patch_size,
        in_channels: 1,
        num_classes,
        base_features,
        max_features: MAX_FEATURES,
        stages,
    })
}

impl NetworkTopology {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Spatial grid after stage `i`.
    pub fn grid(&self, i: usize) -> [usize; 3] {
        let mut g = self.patch_size;
        for stage in &self.stages[..=i] {
            for a in 0..3 {
                g[a] /= stage.stride[a];
            }
        }
        g
    }

    pub fn bottleneck_grid(&self) -> [usize; 3] {
        self.grid(self.stages.len() - 1)
    }

    /// Resolutions carrying a supervision head: all but the two coarsest
    /// (the bottleneck counts as one); always at least full resolution.
    pub fn head_resolutions(&self) -> Vec<usize> {
        let last = self.stages.len().saturating_sub(3);
        (0..=last).collect()
    }

    pub fn head_weights(&self) -> Vec<f64> {
        halving_weights(self.head_resolutions().len())
    }

    /// Checks the structural invariants; used on topologies read from disk.
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.stages.is_empty(), "topology without stages");
        ensure!(self.stages[0].stride == [1, 1, 1], "stage 0 must not downsample");
        ensure!(self.in_channels >= 1 && self.num_classes >= 2, "bad channel counts");
        let planned = plan_topology(self.patch_size, self.base_features, self.num_classes)?;
        ensure!(
            planned.stages == self.stages && self.max_features == MAX_FEATURES,
            "topology stages disagree with the plan for patch {:?}",
            self.patch_size
        );
        ensure!(self.in_channels == 1, "only single-channel input is supported");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: [usize; 3],
    padding: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    /// conv - norm - nonlinearity
    Plain { conv: Conv, norm: Norm },
    /// conv - norm - relu - conv - norm (+ shortcut) - relu
    Residual {
        conv1: Conv,
        norm1: Norm,
        conv2: Conv,
        norm2: Norm,
        shortcut: Option<(Conv, Norm)>,
    },
    /// [norm - relu] - conv - norm - relu - conv (+ shortcut). The leading
    /// norm is absent on the first block of a stage, whose input is already
    /// activated.
    PreAct {
        pre: Option<Norm>,
        conv1: Conv,
        norm1: Norm,
        conv2: Conv,
        shortcut: Option<(Conv, Norm)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    blocks: Vec<Block>,
    /// Trailing norm - relu of pre-activation stages.
    post: Option<Norm>,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    resolution: usize,
    upsample: usize,
    stride: [usize; 3],
    blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    variant: NetworkVariant,
    topology: NetworkTopology,
    params: Vec<Parameter>,
    encoder: Vec<EncoderStage>,
    /// Coarse to fine.
    decoder: Vec<DecoderStage>,
    /// `(resolution, conv)`, full resolution first.
    heads: Vec<(usize, Conv)>,
}

struct Builder {
    seed: u64,
    params: Vec<Parameter>,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    /// He-normal weights with the given fan-in.
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = math::sqrt(2.0 / fan_in as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut r = rng::stream(self.seed, &[0x5EED, self.params.len() as u64]);
        let value = Tensor::from_fn(shape, |_| normal.sample(&mut r));
        self.push(name, value)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: [usize; 3], bias: bool) -> Conv {
        let weight = self.he(format!("{prefix}.weight"), &[cout, cin, k, k, k], cin * k * k * k);
        let bias = bias.then(|| self.push(format!("{prefix}.bias"), Tensor::zeros(&[cout])));
        Conv {
            weight,
            bias,
            stride,
            padding: [k / 2; 3],
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{prefix}.weight"), Tensor::ones(&[channels])),
            beta: self.push(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
        }
    }

    fn plain(&mut self, prefix: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Block {
        Block::Plain {
            conv: self.conv(&format!("{prefix}.conv"), cin, cout, 3, stride, false),
            norm: self.norm(&format!("{prefix}.norm"), cout),
        }
    }

    fn shortcut(&mut self, prefix: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Option<(Conv, Norm)> {
        (cin != cout || stride != [1, 1, 1]).then(|| {
            (
                self.conv(&format!("{prefix}.shortcut.conv"), cin, cout, 1, stride, false),
                self.norm(&format!("{prefix}.shortcut.norm"), cout),
            )
        })
    }
}

/// Builds `variant` on `topology` with He-normal weights drawn from `seed`.
pub fn build_network(variant: NetworkVariant, topology: &NetworkTopology, seed: u64) -> Result<Network> {
    topology.validate()?;
    let mut b = Builder {
        seed,
        params: Vec::new(),
    };
    let mut encoder = Vec::new();
    let mut cin = topology.in_channels;
    for (i, stage) in topology.stages.iter().enumerate() {
        let f = stage.features;
        let mut blocks = Vec::new();
        let mut post = None;
        match variant {
            NetworkVariant::Plain => {
                blocks.push(b.plain(&format!("encoder.stage{i}.block0"), cin, f, stage.stride));
                blocks.push(b.plain(&format!("encoder.stage{i}.block1"), f, f, [1, 1, 1]));
            }
            NetworkVariant::Residual => {
                for j in 0..stage.encoder_blocks {
                    let p = format!("encoder.stage{i}.block{j}");
                    let (c, s) = if j == 0 { (cin, stage.stride) } else { (f, [1, 1, 1]) };
                    let conv1 = b.conv(&format!("{p}.conv1"), c, f, 3, s, false);
                    let norm1 = b.norm(&format!("{p}.norm1"), f);
                    let conv2 = b.conv(&format!("{p}.conv2"), f, f, 3, [1, 1, 1], false);
                    let norm2 = b.norm(&format!("{p}.norm2"), f);
                    let shortcut = b.shortcut(&p, c, f, s);
                    blocks.push(Block::Residual {
                        conv1,
                        norm1,
                        conv2,
                        norm2,
                        shortcut,
                    });
                }
            }
            NetworkVariant::PreActResidual => {
                for j in 0..stage.encoder_blocks {
                    let p = format!("encoder.stage{i}.block{j}");
                    let (c, s) = if j == 0 { (cin, stage.stride) } else { (f, [1, 1, 1]) };
                    let pre = (j > 0).then(|| b.norm(&format!("{p}.norm0"), c));
                    let conv1 = b.conv(&format!("{p}.conv1"), c, f, 3, s, false);
                    let norm1 = b.norm(&format!("{p}.norm1"), f);
                    let conv2 = b.conv(&format!("{p}.conv2"), f, f, 3, [1, 1, 1], false);
                    let shortcut = b.shortcut(&p, c, f, s);
                    blocks.push(Block::PreAct {
                        pre,
                        conv1,
                        norm1,
                        conv2,
                        shortcut,
                    });
                }
                post = Some(b.norm(&format!("encoder.stage{i}.norm"), f));
            }
        }
        encoder.push(EncoderStage { blocks, post });
        cin = f;
    }

    let heads_at = topology.head_resolutions();
    let mut decoder = Vec::new();
    let mut heads = Vec::new();
    let s = topology.stages.len();
    for i in (0..s.saturating_sub(1)).rev() {
        let f = topology.stages[i].features;
        let coarse = topology.stages[i + 1].features;
        let stride = topology.stages[i + 1].stride;
        let fan_in = coarse;
        let upsample = b.he(
            format!("decoder.stage{i}.upsample.weight"),
            &[coarse, f, stride[0], stride[1], stride[2]],
            fan_in,
        );
        let blocks = match variant {
            NetworkVariant::Plain => vec![
                b.plain(&format!("decoder.stage{i}.block0"), 2 * f, f, [1, 1, 1]),
                b.plain(&format!("decoder.stage{i}.block1"), f, f, [1, 1, 1]),
            ],
            _ => vec![b.plain(&format!("decoder.stage{i}.block0"), 2 * f, f, [1, 1, 1])],
        };
        decoder.push(DecoderStage {
            resolution: i,
            upsample,
            stride,
            blocks,
        });
    }
    for &r in &heads_at {
        let f = topology.stages[r].features;
        heads.push((
            r,
            b.conv(&format!("heads.{r}"), f, topology.num_classes, 1, [1, 1, 1], true),
        ));
    }
    Ok(Network {
        variant,
        topology: topology.clone(),
        params: b.params,
        encoder,
        decoder,
        heads,
    })
}

/// Result of [`Network::forward`]: the tape plus the head logits on it.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// Full resolution first.
    pub heads: Vec<SupervisionHead>,
    params: Vec<NodeId>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.heads[0].logits)
    }
}

struct Ctx {
    g: Graph,
    p: Vec<NodeId>,
    slope: f64,
}

impl Ctx {
    fn conv(&mut self, x: NodeId, c: &Conv) -> Result<NodeId> {
        let bias = c.bias.map(|b| self.p[b]);
        self.g.conv3d(x, self.p[c.weight], bias, c.stride, c.padding)
    }

    fn norm(&mut self, x: NodeId, n: &Norm) -> Result<NodeId> {
        self.g.instance_norm(x, self.p[n.gamma], self.p[n.beta], NORM_EPS)
    }

    fn act(&mut self, x: NodeId) -> Result<NodeId> {
        self.g.leaky_relu(x, self.slope)
    }

    fn block(&mut self, x: NodeId, block: &Block) -> Result<NodeId> {
        match block {
            Block::Plain { conv, norm } => {
                let y = self.conv(x, conv)?;
                let y = self.norm(y, norm)?;
                self.act(y)
            }
            Block::Residual {
                conv1,
                norm1,
                conv2,
                norm2,
                shortcut,
            } => {
                let y = self.conv(x, conv1)?;
                let y = self.norm(y, norm1)?;
                let y = self.act(y)?;
                let y = self.conv(y, conv2)?;
                let y = self.norm(y, norm2)?;
                let skip = self.shortcut(x, shortcut)?;
                let y = self.g.add(y, skip)?;
                self.act(y)
            }
            Block::PreAct {
                pre,
                conv1,
                norm1,
                conv2,
                shortcut,
            } => {
                let mut y = x;
                if let Some(n) = pre {
                    y = self.norm(y, n)?;
                    y = self.act(y)?;
                }
                let y = self.conv(y, conv1)?;
                let y = self.norm(y, norm1)?;
                let y = self.act(y)?;
                let y = self.conv(y, conv2)?;
                let skip = self.shortcut(x, shortcut)?;
                self.g.add(y, skip)
            }
        }
    }

    fn shortcut(&mut self, x: NodeId, shortcut: &Option<(Conv, Norm)>) -> Result<NodeId> {
        match shortcut {
            Some((conv, norm)) => {
                let y = self.conv(x, conv)?;
                self.norm(y, norm)
            }
            None => Ok(x),
        }
    }
}

impl Network {
    pub fn variant(&self) -> NetworkVariant {
        self.variant
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Replaces every parameter value (and momentum buffer), matched by name
    /// and shape. Used when restoring checkpoints.
    pub fn load_parameters(&mut self, params: Vec<Parameter>) -> Result<()> {
        ensure!(
            params.len() == self.params.len(),
            "checkpoint has {} parameters, network has {}",
            params.len(),
            self.params.len()
        );
        for (mine, theirs) in self.params.iter().zip(&params) {
            ensure!(
                mine.name == theirs.name && mine.value.shape() == theirs.value.shape(),
                "parameter {} {:?} does not match {} {:?}",
                theirs.name,
                theirs.value.shape(),
                mine.name,
                mine.value.shape()
            );
            ensure!(
                theirs.momentum.len() == theirs.value.len(),
                "momentum buffer of {} has the wrong length",
                theirs.name
            );
        }
        self.params = params;
        Ok(())
    }

    /// Records a forward pass of `patch` (`[B, 1, D, H, W]` at the planned
    /// patch size). With `training`, parameters are differentiable leaves and
    /// every supervision head is returned; otherwise only full-resolution
    /// logits are produced and nothing is kept for backward.
    pub fn forward(&self, patch: &Tensor, training: bool) -> Result<ForwardPass> {
        let [_, c, d, h, w] = patch.dims5()?;
        ensure!(
            c == self.topology.in_channels && [d, h, w] == self.topology.patch_size,
            "input {:?} does not match planned patch {:?} with {} channel(s)",
            patch.shape(),
            self.topology.patch_size,
            self.topology.in_channels
        );
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.params.iter().map(|q| g.leaf(q.value.clone(), training)).collect();
        let input = g.constant(patch.clone());
        let mut ctx = Ctx {
            g,
            p,
            slope: self.variant.negative_slope(),
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for stage in &self.encoder {
            for block in &stage.blocks {
                x = ctx.block(x, block)?;
            }
            if let Some(n) = &stage.post {
                x = ctx.norm(x, n)?;
                x = ctx.act(x)?;
            }
            skips.push(x);
        }

        let mut features = vec![None; self.encoder.len()];
        features[self.encoder.len() - 1] = Some(x);
        for stage in &self.decoder {
            let up = ctx.g.conv3d_transpose(x, ctx.p[stage.upsample], stage.stride)?;
            x = ctx.g.concat_channels(skips[stage.resolution], up)?;
            for block in &stage.blocks {
                x = ctx.block(x, block)?;
            }
            features[stage.resolution] = Some(x);
        }

        let weights = self.topology.head_weights();
        let count = if training { self.heads.len() } else { 1 };
        let mut heads = Vec::with_capacity(count);
        for (k, (r, conv)) in self.heads.iter().take(count).enumerate() {
            let src = features[*r].expect("decoder covers every head resolution");
            let logits = ctx.conv(src, conv)?;
            heads.push(SupervisionHead {
                resolution_index: *r,
                logits,
                weight: if training { weights[k] } else { 1.0 },
            });
        }
        Ok(ForwardPass {
            graph: ctx.g,
            heads,
            params: ctx.p,
        })
    }

    /// Full-resolution logits without recording gradients.
    pub fn predict_logits(&self, patch: &Tensor) -> Result<Tensor> {
        let pass = self.forward(patch, false)?;
        let id = pass.heads[0].logits;
        Ok(pass.graph.into_value(id))
    }

    /// Moves the gradients of a backpropagated `pass` onto the parameters.
    pub fn collect_gradients(&mut self, pass: &mut ForwardPass) -> Result<()> {
        ensure!(
            pass.params.len() == self.params.len(),
            "forward pass belongs to a different network"
        );
        for (param, &id) in self.params.iter_mut().zip(&pass.params) {
            let grad = pass
                .graph
                .take_grad(id)
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            param.grad = Some(grad);
        }
        Ok(())
    }
}
