//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operator appends a node holding its forward
//! value plus whatever context its backward rule needs, and returns the
//! node's [`NodeId`]. Inputs therefore always precede their consumers, and
//! [`Graph::backward`] is a single reverse sweep over the tape that visits
//! each node once, accumulating gradients additively across fan-out.
//!
//! Nodes only carry gradients when some leaf upstream of them was created
//! with [`Graph::variable`]; constant subgraphs cost nothing in the sweep.

mod conv;
mod direct;
mod loss_ops;
mod norm;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::{LabelTensor, Tensor};

pub use conv::{conv_output_extent, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    },
    ConvTranspose3d {
        input: NodeId,
        weight: NodeId,
        stride: [usize; 3],
    },
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: LabelTensor,
        probabilities: Vec<f64>,
    },
    SoftDice {
        probabilities: NodeId,
        labels: LabelTensor,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. Confined to a single thread of control.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Consumes the tape, keeping only the value of `id`.
    pub fn into_value(mut self, id: NodeId) -> Tensor {
        core::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(0.0))
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        ensure!(id.0 < self.nodes.len(), "node {} is not on this graph", id.0);
        Ok(())
    }

    /// 3-D convolution; weight `[Cout, Cin, kd, kh, kw]`, bias `[Cout]`.
    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let geometry = ConvGeometry::plan(x.shape(), w.shape(), stride, padding)?;
        let b = match bias {
            Some(id) => {
                self.check(id)?;
                let b = &self.nodes[id.0].value;
                ensure!(
                    b.shape() == [geometry.out_channels],
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    geometry.out_channels
                );
                Some(b)
            }
            None => None,
        };
        let out = conv::conv3d_forward(x, w, b, &geometry);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    /// Transposed convolution with kernel extent equal to the stride;
    /// weight `[Cin, Cout, sd, sh, sw]`. Exact adjoint of the matching
    /// unpadded strided [`Graph::conv3d`].
    pub fn conv3d_transpose(&mut self, input: NodeId, weight: NodeId, stride: [usize; 3]) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        let out = conv::conv_transpose_forward(&self.nodes[input.0].value, &self.nodes[weight.0].value, stride)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(out, rg, Op::ConvTranspose3d { input, weight, stride }))
    }

    /// Per-sample, per-channel normalization over the spatial axes followed
    /// by the affine `gamma * x + beta`.
    pub fn instance_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        for id in [input, gamma, beta] {
            self.check(id)?;
        }
        let (out, normalized, inv_std) = norm::instance_norm_forward(
            &self.nodes[input.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// `max(x, slope * x)`; slope 0 is a plain ReLU.
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        self.check(input)?;
        ensure!(slope >= 0.0, "negative leaky-ReLU slope {}", slope);
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::LeakyRelu { input, slope }))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.leaky_relu(input, 0.0)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Scale { input, factor }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let s = self.nodes[input.0].value.data().iter().sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input }))
    }

    fn zip_values(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        ensure!(
            x.shape() == y.shape(),
            "elementwise op on shapes {:?} and {:?}",
            x.shape(),
            y.shape()
        );
        Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    /// Concatenates `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let [bx, ca, dx, hx, wx] = x.dims5()?;
        let [by, cb, dy, hy, wy] = y.dims5()?;
        ensure!(
            bx == by && [dx, hx, wx] == [dy, hy, wy],
            "concat of {:?} and {:?}: non-channel extents differ",
            x.shape(),
            y.shape()
        );
        let s = dx * hx * wx;
        let mut data = Vec::with_capacity(x.len() + y.len());
        for n in 0..bx {
            data.extend_from_slice(&x.data()[n * ca * s..(n + 1) * ca * s]);
            data.extend_from_slice(&y.data()[n * cb * s..(n + 1) * cb * s]);
        }
        let out = Tensor::new(&[bx, ca + cb, dx, hx, wx], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    /// Softmax over the channel axis of a 5-D tensor, per voxel.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let [_, c, ..] = x.dims5()?;
        ensure!(c >= 2, "softmax over {} channel(s)", c);
        let out = Tensor::new(x.shape(), loss_ops::softmax(x))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Softmax { input }))
    }

    /// Mean over voxels of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &LabelTensor) -> Result<NodeId> {
        self.check(logits)?;
        let x = &self.nodes[logits.0].value;
        let (loss, probabilities) = loss_ops::cross_entropy_forward(x, labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                probabilities,
            },
        ))
    }

    /// Batch soft Dice loss over the foreground classes `1..C`.
    pub fn soft_dice(&mut self, probabilities: NodeId, labels: &LabelTensor, eps: f64) -> Result<NodeId> {
        self.check(probabilities)?;
        let p = &self.nodes[probabilities.0].value;
        let loss = loss_ops::soft_dice_forward(p, labels, eps)?;
        let rg = self.any_grad(&[probabilities]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftDice {
                probabilities,
                labels: labels.clone(),
                eps,
            },
        ))
    }

    /// Populates gradients of every differentiable node upstream of `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        ensure!(
            self.nodes[loss.0].value.is_scalar(),
            "backward from non-scalar node of shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::new(self.nodes[loss.0].value.shape(), vec![1.0])?;
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (id, g) in contributions {
                self.accumulate(id, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<f64>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                    *e += v;
                }
            }
            None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, grad: &Tensor) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let node = &self.nodes[i];
        let g = grad.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = conv::conv3d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    geometry,
                    wants(*input),
                    wants(*weight),
                );
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        out.push((*b, grads.bias));
                    }
                }
            }
            Op::ConvTranspose3d { input, weight, stride } => {
                let (dx, dw) = conv::conv_transpose_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    *stride,
                    wants(*input),
                    wants(*weight),
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let grads = norm::instance_norm_backward(
                    self.nodes[input.0].value.shape(),
                    &self.nodes[gamma.0].value,
                    normalized,
                    inv_std,
                    g,
                    wants(*input),
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.nodes[input.0].value.data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                out.push((*input, d));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                out.push((*a, g.iter().zip(y).map(|(gv, v)| gv * v).collect()));
                out.push((*b, g.iter().zip(x).map(|(gv, v)| gv * v).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].value.len();
                out.push((*input, vec![g[0]; n]));
            }
            Op::ConcatChannels { a, b } => {
                let [bn, ca, d, h, w] = self.nodes[a.0].value.dims5()?;
                let cb = self.nodes[b.0].value.dims5()?[1];
                let s = d * h * w;
                let mut ga = Vec::with_capacity(bn * ca * s);
                let mut gb = Vec::with_capacity(bn * cb * s);
                for n in 0..bn {
                    let base = n * (ca + cb) * s;
                    ga.extend_from_slice(&g[base..base + ca * s]);
                    gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Softmax { input } => {
                out.push((*input, loss_ops::softmax_backward(&node.value, g)?));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probabilities,
            } => {
                let shape = self.nodes[logits.0].value.shape();
                out.push((
                    *logits,
                    loss_ops::cross_entropy_backward(shape, probabilities, labels, g[0]),
                ));
            }
            Op::SoftDice {
                probabilities,
                labels,
                eps,
            } => {
                out.push((
                    *probabilities,
                    loss_ops::soft_dice_backward(&self.nodes[probabilities.0].value, labels, *eps, g[0]),
                ));
            }
        }
        Ok(out)
    }
}
