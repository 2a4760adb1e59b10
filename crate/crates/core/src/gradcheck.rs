//! Central finite-difference checks of the tape's gradients.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{deep_supervision_loss, halving_weights, SupervisionHead, DICE_EPS};
use crate::math;
use crate::rng;
use crate::tensor::{LabelTensor, Tensor};

/// Builds a scalar from the given variable nodes.
pub type Builder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn evaluate(build: &Builder<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.value(out).item()
}

/// Analytic gradients of `build` at `inputs`.
pub fn analytic(build: &Builder<'_>, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element
/// of every input.
pub fn numeric(build: &Builder<'_>, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            point[k].data_mut()[i] = x + h;
            let up = evaluate(build, &point)?;
            point[k].data_mut()[i] = x - h;
            let down = evaluate(build, &point)?;
            point[k].data_mut()[i] = x;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &Tensor, n: &Tensor) -> Result<f64> {
    ensure!(
        a.shape() == n.shape(),
        "gradient shapes {:?} and {:?}",
        a.shape(),
        n.shape()
    );
    let norm = |it: &mut dyn Iterator<Item = f64>| math::sqrt(it.map(|v| v * v).sum::<f64>());
    let diff = norm(&mut a.data().iter().zip(n.data()).map(|(x, y)| x - y));
    let scale = norm(&mut a.data().iter().copied()).max(norm(&mut n.data().iter().copied()));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn max_relative_error(build: &Builder<'_>, inputs: &[Tensor], h: f64) -> Result<f64> {
    let a = analytic(build, inputs)?;
    let n = numeric(build, inputs, h)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&n) {
        worst = worst.max(relative_error(x, y)?);
    }
    Ok(worst)
}

/// Reduces a tensor node to a scalar through fixed weights, so every output
/// element influences the checked value differently.
pub fn project(g: &mut Graph, node: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.constant(weights.clone());
    let m = g.mul(node, w)?;
    g.sum(m)
}

/// One differentiable operator instance: a scalar-valued builder and the
/// point it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Builder<'static>>,
    pub inputs: Vec<Tensor>,
}

fn normal(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn uniform(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn labels(r: &mut rng::Rng, shape: [usize; 4], classes: u8) -> LabelTensor {
    let n = shape.iter().product();
    LabelTensor::new(shape, (0..n).map(|_| r.random_range(0..classes)).collect()).expect("shape matches")
}

/// Every differentiable operator at a random point drawn from `seed`, with
/// no tensor axis longer than 4.
pub fn operator_suite(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, &[0x6AD]);
    let mut cases: Vec<OpCase> = Vec::new();

    let proj = normal(&mut r, &[2, 3, 4, 4, 4]);
    cases.push(OpCase {
        name: "conv3d",
        build: Box::new(move |g, ids| {
            let y = g.conv3d(ids[0], ids[1], Some(ids[2]), [1, 1, 1], [1, 1, 1])?;
            project(g, y, &proj)
        }),
        inputs: vec![
            normal(&mut r, &[2, 2, 4, 4, 4]),
            normal(&mut r, &[3, 2, 3, 3, 3]),
            normal(&mut r, &[3]),
        ],
    });

    let proj = normal(&mut r, &[1, 2, 4, 2, 2]);
    cases.push(OpCase {
        name: "conv3d_strided",
        build: Box::new(move |g, ids| {
            let y = g.conv3d(ids[0], ids[1], None, [1, 2, 2], [1, 1, 1])?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[1, 3, 4, 4, 4]), normal(&mut r, &[2, 3, 3, 3, 3])],
    });

    let proj = normal(&mut r, &[2, 2, 2, 4, 4]);
    cases.push(OpCase {
        name: "conv3d_transpose",
        build: Box::new(move |g, ids| {
            let y = g.conv3d_transpose(ids[0], ids[1], [1, 2, 2])?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[2, 3, 2, 2, 2]), normal(&mut r, &[3, 2, 1, 2, 2])],
    });

    let proj = normal(&mut r, &[2, 3, 4, 4, 3]);
    cases.push(OpCase {
        name: "instance_norm",
        build: Box::new(move |g, ids| {
            let y = g.instance_norm(ids[0], ids[1], ids[2], 1e-5)?;
            project(g, y, &proj)
        }),
        inputs: vec![
            normal(&mut r, &[2, 3, 4, 4, 3]),
            uniform(&mut r, &[3], 0.5, 1.5),
            normal(&mut r, &[3]),
        ],
    });

    let proj = normal(&mut r, &[1, 2, 4, 4, 4]);
    cases.push(OpCase {
        name: "leaky_relu",
        build: Box::new(move |g, ids| {
            let y = g.leaky_relu(ids[0], 0.01)?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[1, 2, 4, 4, 4])],
    });

    let proj = normal(&mut r, &[1, 2, 3, 4, 4]);
    cases.push(OpCase {
        name: "add",
        build: Box::new(move |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let y = g.mul(y, ids[1])?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[1, 2, 3, 4, 4]), normal(&mut r, &[1, 2, 3, 4, 4])],
    });

    let proj = normal(&mut r, &[1, 4, 2, 3, 4]);
    cases.push(OpCase {
        name: "concat_channels",
        build: Box::new(move |g, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            let y = g.scale(y, 0.5)?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[1, 1, 2, 3, 4]), normal(&mut r, &[1, 3, 2, 3, 4])],
    });

    let proj = normal(&mut r, &[2, 3, 4, 4, 4]);
    cases.push(OpCase {
        name: "softmax",
        build: Box::new(move |g, ids| {
            let y = g.softmax_channels(ids[0])?;
            project(g, y, &proj)
        }),
        inputs: vec![normal(&mut r, &[2, 3, 4, 4, 4])],
    });

    let l = labels(&mut r, [2, 4, 4, 4], 3);
    cases.push(OpCase {
        name: "cross_entropy",
        build: Box::new(move |g, ids| g.cross_entropy(ids[0], &l)),
        inputs: vec![normal(&mut r, &[2, 3, 4, 4, 4])],
    });

    let l = labels(&mut r, [2, 4, 4, 4], 3);
    cases.push(OpCase {
        name: "soft_dice",
        build: Box::new(move |g, ids| g.soft_dice(ids[0], &l, DICE_EPS)),
        inputs: vec![uniform(&mut r, &[2, 3, 4, 4, 4], 0.05, 0.95)],
    });

    let l = labels(&mut r, [2, 4, 4, 4], 3);
    cases.push(OpCase {
        name: "soft_dice_of_softmax",
        build: Box::new(move |g, ids| {
            let p = g.softmax_channels(ids[0])?;
            g.soft_dice(p, &l, DICE_EPS)
        }),
        inputs: vec![normal(&mut r, &[2, 3, 4, 4, 4])],
    });

    let l = labels(&mut r, [2, 4, 4, 4], 3);
    cases.push(OpCase {
        name: "deep_supervision_loss",
        build: Box::new(move |g, ids| {
            let w = halving_weights(2);
            let heads = [
                SupervisionHead {
                    resolution_index: 0,
                    logits: ids[0],
                    weight: w[0],
                },
                SupervisionHead {
                    resolution_index: 1,
                    logits: ids[1],
                    weight: w[1],
                },
            ];
            deep_supervision_loss(g, &heads, &l)
        }),
        inputs: vec![normal(&mut r, &[2, 3, 4, 4, 4]), normal(&mut r, &[2, 3, 2, 2, 2])],
    });

    cases
}

/// `(name, max relative error)` for every case of [`operator_suite`].
pub fn run_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    operator_suite(seed)
        .into_iter()
        .map(|c| Ok((c.name, max_relative_error(&*c.build, &c.inputs, h)?)))
        .collect()
}
