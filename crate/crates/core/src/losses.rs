//! Training objective: cross-entropy plus batch soft Dice, summed over
//! deep-supervision heads.

use alloc::vec::Vec;

use crate::error::{contract, ensure, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::LabelTensor;

/// Smoothing term in the soft Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Mean voxelwise cross-entropy of `logits` `[B, C, D, H, W]` against labels
/// `[B, D, H, W]`.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &LabelTensor) -> Result<NodeId> {
    graph.cross_entropy(logits, labels)
}

/// `1 - mean_c (2·Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)` over foreground
/// classes `c = 1..C`, with sums running over the whole batch.
pub fn soft_dice_loss(graph: &mut Graph, probabilities: NodeId, labels: &LabelTensor) -> Result<NodeId> {
    graph.soft_dice(probabilities, labels, DICE_EPS)
}

/// `cross_entropy + soft_dice_loss` for one set of logits.
pub fn dice_ce_loss(graph: &mut Graph, logits: NodeId, labels: &LabelTensor) -> Result<NodeId> {
    let ce = cross_entropy(graph, logits, labels)?;
    let probabilities = graph.softmax_channels(logits)?;
    let dice = soft_dice_loss(graph, probabilities, labels)?;
    graph.add(ce, dice)
}

/// Logits produced at one decoder resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionHead {
    /// 0 is full resolution; larger values are coarser.
    pub resolution_index: usize,
    pub logits: NodeId,
    pub weight: f64,
}

/// Normalizes raw weights to sum to one.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    ensure!(
        total > 0.0 && raw.iter().all(|&w| w >= 0.0),
        "supervision weights {:?} must be non-negative with a positive sum",
        raw
    );
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Halving schedule `1, 1/2, 1/4, ...` over `count` heads, normalized.
pub fn halving_weights(count: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..count).map(|i| 1.0 / (1u64 << i) as f64).collect();
    normalize_weights(&raw).unwrap_or_default()
}

/// `Σ_i weight_i · (CE_i + Dice_i)` where head `i` is scored against the
/// labels subsampled onto its grid. Heads are evaluated in ascending
/// resolution order regardless of the order they are passed in.
pub fn deep_supervision_loss(
    graph: &mut Graph,
    heads: &[SupervisionHead],
    full_res_labels: &LabelTensor,
) -> Result<NodeId> {
    ensure!(!heads.is_empty(), "deep supervision needs at least one head");
    let total: f64 = heads.iter().map(|h| h.weight).sum();
    ensure!(
        (total - 1.0).abs() <= 1e-12,
        "supervision head weights sum to {}, expected 1",
        total
    );
    let mut ordered = heads.to_vec();
    ordered.sort_by_key(|h| h.resolution_index);

    let [_, fd, fh, fw] = full_res_labels.shape();
    let mut sum: Option<NodeId> = None;
    for head in ordered {
        let [_, _, d, h, w] = graph.value(head.logits).dims5()?;
        let mut factors = [0; 3];
        for (a, (full, grid)) in [(fd, d), (fh, h), (fw, w)].into_iter().enumerate() {
            if grid == 0 || full % grid != 0 || !(full / grid).is_power_of_two() {
                return Err(contract!(
                    "head grid {:?} is not reachable from labels {:?} by stride-2 steps",
                    [d, h, w],
                    [fd, fh, fw]
                ));
            }
            factors[a] = full / grid;
        }
        let labels = downsample_labels(full_res_labels, factors)?;
        let term = dice_ce_loss(graph, head.logits, &labels)?;
        let weighted = graph.scale(term, head.weight)?;
        sum = Some(match sum {
            Some(acc) => graph.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(sum.expect("at least one head"))
}

/// Nearest-neighbour subsampling anchored at the first voxel of each block:
/// output voxel `i` takes input voxel `i * factor` on every axis.
pub fn downsample_labels(labels: &LabelTensor, factors: [usize; 3]) -> Result<LabelTensor> {
    ensure!(
        factors.iter().all(|&f| f > 0),
        "zero downsampling factor in {:?}",
        factors
    );
    if factors == [1, 1, 1] {
        return Ok(labels.clone());
    }
    let [b, d, h, w] = labels.shape();
    let out = [d.div_ceil(factors[0]), h.div_ceil(factors[1]), w.div_ceil(factors[2])];
    let mut data = Vec::with_capacity(b * out[0] * out[1] * out[2]);
    for n in 0..b {
        for z in 0..out[0] {
            for y in 0..out[1] {
                let row = ((n * d + z * factors[0]) * h + y * factors[1]) * w;
                for x in 0..out[2] {
                    data.push(labels.data()[row + x * factors[2]]);
                }
            }
        }
    }
    LabelTensor::new([b, out[0], out[1], out[2]], data)
}
