use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::math;
use crate::tensor::Tensor;

/// Returns `(output, normalized input, 1/sqrt(var + eps) per slice)`.
pub(super) fn instance_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [b, c, d, h, w] = x.dims5()?;
    ensure!(
        gamma.shape() == [c] && beta.shape() == [c],
        "instance_norm affine shapes {:?}/{:?} for {} channels",
        gamma.shape(),
        beta.shape(),
        c
    );
    let s = d * h * w;
    if s < 2 {
        return Err(Error::DegenerateStatistics(alloc::format!(
            "instance_norm over a spatial volume of {} voxel(s)",
            s
        )));
    }
    ensure!(eps >= 0.0, "negative epsilon {}", eps);
    let stats = exec::map_indices(b * c, |i| {
        let slice = &x.data()[i * s..(i + 1) * s];
        let mean = slice.iter().sum::<f64>() / s as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
        (mean, 1.0 / math::sqrt(var + eps))
    });
    let mut normalized = x.data().to_vec();
    exec::for_each_chunk(&mut normalized, s, |i, slice| {
        let (mean, is) = stats[i];
        for v in slice.iter_mut() {
            *v = (*v - mean) * is;
        }
    });
    let inv_std: Vec<f64> = stats.iter().map(|&(_, is)| is).collect();
    let mut out = vec![0.0; x.len()];
    for (i, (o, n)) in out.chunks_mut(s).zip(normalized.chunks(s)).enumerate() {
        let ch = i % c;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for (ov, nv) in o.iter_mut().zip(n) {
            *ov = g * nv + bt;
        }
    }
    Ok((Tensor::new(x.shape(), out)?, normalized, inv_std))
}

pub(super) struct NormGrads {
    pub input: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(super) fn instance_norm_backward(
    shape: &[usize],
    gamma: &Tensor,
    normalized: &[f64],
    inv_std: &[f64],
    gout: &[f64],
    need_input: bool,
) -> NormGrads {
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (gs, ns)) in gout.chunks(s).zip(normalized.chunks(s)).enumerate() {
        let ch = i % c;
        dgamma[ch] += gs.iter().zip(ns).map(|(g, n)| g * n).sum::<f64>();
        dbeta[ch] += gs.iter().sum::<f64>();
    }
    let input = need_input.then(|| {
        let mut dx = vec![0.0; gout.len()];
        exec::for_each_chunk(&mut dx, s, |i, dxs| {
            let gs = &gout[i * s..(i + 1) * s];
            let ns = &normalized[i * s..(i + 1) * s];
            let g = gamma.data()[i % c];
            let sum_g: f64 = gs.iter().sum::<f64>() * g;
            let sum_gn: f64 = gs.iter().zip(ns).map(|(a, b)| a * b).sum::<f64>() * g;
            let k = inv_std[i] / s as f64;
            for ((d, gv), nv) in dxs.iter_mut().zip(gs).zip(ns) {
                *d = k * (s as f64 * g * gv - sum_g - nv * sum_gn);
            }
        });
        dx
    });
    NormGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    }
}
