use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::math;
use crate::tensor::{LabelTensor, Tensor};

/// Channel softmax of a `[B, C, D, H, W]` tensor with max subtraction.
pub(super) fn softmax(x: &Tensor) -> Vec<f64> {
    let shape = x.shape();
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    let mut max = vec![0.0; s];
    let mut total = vec![0.0; s];
    for n in 0..b {
        let xs = &x.data()[n * c * s..(n + 1) * c * s];
        let ys = &mut out[n * c * s..(n + 1) * c * s];
        max.copy_from_slice(&xs[..s]);
        for ch in 1..c {
            for (m, &v) in max.iter_mut().zip(&xs[ch * s..(ch + 1) * s]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        total.fill(0.0);
        for ch in 0..c {
            let row = &mut ys[ch * s..(ch + 1) * s];
            for ((y, &v), (m, t)) in row
                .iter_mut()
                .zip(&xs[ch * s..(ch + 1) * s])
                .zip(max.iter().zip(total.iter_mut()))
            {
                *y = math::exp(v - m);
                *t += *y;
            }
        }
        for ch in 0..c {
            for (y, t) in ys[ch * s..(ch + 1) * s].iter_mut().zip(&total) {
                *y /= t;
            }
        }
    }
    out
}

/// `dx_c = p_c * (g_c - sum_j g_j p_j)` per voxel.
pub(super) fn softmax_backward(p: &Tensor, g: &[f64]) -> Result<Vec<f64>> {
    let [b, c, d, h, w] = p.dims5()?;
    let s = d * h * w;
    let mut out = vec![0.0; p.len()];
    let mut dot = vec![0.0; s];
    for n in 0..b {
        let base = n * c * s;
        dot.fill(0.0);
        for ch in 0..c {
            let r = base + ch * s..base + (ch + 1) * s;
            for ((acc, pv), gv) in dot.iter_mut().zip(&p.data()[r.clone()]).zip(&g[r]) {
                *acc += pv * gv;
            }
        }
        for ch in 0..c {
            let r = base + ch * s..base + (ch + 1) * s;
            for (((o, pv), gv), dv) in out[r.clone()].iter_mut().zip(&p.data()[r.clone()]).zip(&g[r]).zip(&dot) {
                *o = pv * (gv - dv);
            }
        }
    }
    Ok(out)
}

fn check_labels(x: &Tensor, labels: &LabelTensor) -> Result<[usize; 5]> {
    let dims = x.dims5()?;
    let [b, c, d, h, w] = dims;
    ensure!(
        labels.shape() == [b, d, h, w],
        "labels of shape {:?} for predictions of shape {:?}",
        labels.shape(),
        x.shape()
    );
    if let Some(m) = labels.max_label() {
        ensure!((m as usize) < c, "label {} out of range for {} classes", m, c);
    }
    Ok(dims)
}

pub(super) fn cross_entropy_forward(x: &Tensor, labels: &LabelTensor) -> Result<(f64, Vec<f64>)> {
    let [b, c, d, h, w] = check_labels(x, labels)?;
    ensure!(c >= 2, "cross entropy over {} class(es)", c);
    let s = d * h * w;
    let p = softmax(x);
    let mut total = 0.0;
    for n in 0..b {
        let xs = &x.data()[n * c * s..(n + 1) * c * s];
        for v in 0..s {
            // log-sum-exp evaluated directly to keep saturated voxels exact.
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xs[ch * s + v]);
            }
            let mut acc = 0.0;
            for ch in 0..c {
                acc += math::exp(xs[ch * s + v] - m);
            }
            let t = labels.data()[n * s + v] as usize;
            total += m + math::ln(acc) - xs[t * s + v];
        }
    }
    Ok((total / (b * s) as f64, p))
}

pub(super) fn cross_entropy_backward(shape: &[usize], probabilities: &[f64], labels: &LabelTensor, g: f64) -> Vec<f64> {
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let k = g / (b * s) as f64;
    let mut out: Vec<f64> = probabilities.iter().map(|p| p * k).collect();
    for n in 0..b {
        for v in 0..s {
            let t = labels.data()[n * s + v] as usize;
            out[(n * c + t) * s + v] -= k;
        }
    }
    out
}

/// Per foreground class: `(intersection, prediction mass, target count)`.
fn dice_terms(p: &Tensor, labels: &LabelTensor) -> Vec<(f64, f64, f64)> {
    let shape = p.shape();
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut terms = vec![(0.0, 0.0, 0.0); c];
    for n in 0..b {
        let ls = &labels.data()[n * s..(n + 1) * s];
        for (ch, term) in terms.iter_mut().enumerate().skip(1) {
            let ps = &p.data()[(n * c + ch) * s..(n * c + ch + 1) * s];
            for (&pv, &l) in ps.iter().zip(ls) {
                term.1 += pv;
                if l as usize == ch {
                    term.0 += pv;
                    term.2 += 1.0;
                }
            }
        }
    }
    terms
}

pub(super) fn soft_dice_forward(p: &Tensor, labels: &LabelTensor, eps: f64) -> Result<f64> {
    let [_, c, ..] = check_labels(p, labels)?;
    ensure!(c >= 2, "soft dice needs a foreground class, got {} class(es)", c);
    let terms = dice_terms(p, labels);
    let mean_dice = terms[1..]
        .iter()
        .map(|&(i, pm, gc)| (2.0 * i + eps) / (pm + gc + eps))
        .sum::<f64>()
        / (c - 1) as f64;
    Ok(1.0 - mean_dice)
}

pub(super) fn soft_dice_backward(p: &Tensor, labels: &LabelTensor, eps: f64, g: f64) -> Vec<f64> {
    let shape = p.shape();
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let terms = dice_terms(p, labels);
    let scale = -g / (c - 1) as f64;
    let mut out = vec![0.0; p.len()];
    for n in 0..b {
        let ls = &labels.data()[n * s..(n + 1) * s];
        for (ch, &(i, pm, gc)) in terms.iter().enumerate().skip(1) {
            let den = pm + gc + eps;
            let num = 2.0 * i + eps;
            let os = &mut out[(n * c + ch) * s..(n * c + ch + 1) * s];
            for (o, &l) in os.iter_mut().zip(ls) {
                let gv = if l as usize == ch { 1.0 } else { 0.0 };
                *o = scale * (2.0 * gv * den - num) / (den * den);
            }
        }
    }
    out
}
