//! Sliding-window prediction, softmax ensembling and restoration of
//! predictions to the original image grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, ensure, Result};
use crate::graph::Graph;
use crate::preprocessing::{resample_grid, Interpolation};
use crate::tensor::Tensor;
use crate::unet::Network;
use crate::volume::{Geometry, Volume, VolumeKind};

/// Per-voxel class distribution, laid out `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxVolume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SoftmaxVolume {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Largest deviation of a voxel's channel sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let s: f64 = (0..self.channels).map(|c| self.data[c * n + v]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Per-voxel argmax; ties go to the lowest class.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + v] > self.data[best * n + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Window starts along one axis: `0, s, 2s, ...` with `s = patch / 2`, the
/// last one clamped to `extent - patch`, deduplicated.
pub fn tile_positions(extent: usize, patch: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let step = (patch / 2).max(1);
    let last = extent - patch;
    let mut out: Vec<usize> = (0..).map(|i| i * step).take_while(|&o| o < last).collect();
    out.push(last);
    out.dedup();
    out
}

/// All 3D window starts in row-major order.
pub fn tile_grid(extents: [usize; 3], patch: [usize; 3]) -> Vec<[usize; 3]> {
    let axes: Vec<Vec<usize>> = (0..3).map(|a| tile_positions(extents[a], patch[a])).collect();
    let mut out = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 2;

/// Predicts a preprocessed image by averaging softmax outputs of
/// overlapping patch windows. Axes shorter than the patch are padded with
/// zeros after the data and cropped back afterwards.
pub fn sliding_window_predict(net: &Network, image: &Volume) -> Result<SoftmaxVolume> {
    ensure!(
        image.kind() == VolumeKind::Image,
        "prediction input must be an image volume"
    );
    let topo = net.topology();
    ensure!(topo.in_channels == 1, "single-channel networks only");
    let patch = topo.patch_size;
    let classes = topo.num_classes;
    let e = image.extents();
    let padded: [usize; 3] = core::array::from_fn(|a| e[a].max(patch[a]));
    let pn: usize = padded.iter().product();
    let mut src = vec![0.0; pn];
    for z in 0..e[0] {
        for y in 0..e[1] {
            let o = (z * padded[1] + y) * padded[2];
            let i = image.index(z, y, 0);
            src[o..o + e[2]].copy_from_slice(&image.data()[i..i + e[2]]);
        }
    }

    let tiles = tile_grid(padded, patch);
    let tn: usize = patch.iter().product();
    let mut sum = vec![0.0; classes * pn];
    let mut count = vec![0u32; pn];
    for group in tiles.chunks(TILE_BATCH) {
        let mut input = Vec::with_capacity(group.len() * tn);
        for t in group {
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let o = ((t[0] + z) * padded[1] + t[1] + y) * padded[2] + t[2];
                    input.extend_from_slice(&src[o..o + patch[2]]);
                }
            }
        }
        let x = Tensor::new(&[group.len(), 1, patch[0], patch[1], patch[2]], input)?;
        let logits = net.predict_logits(&x)?;
        let mut g = Graph::new();
        let id = g.constant(logits);
        let sm = g.softmax_channels(id)?;
        let probs = g.into_value(sm);
        for (k, t) in group.iter().enumerate() {
            for c in 0..classes {
                let base = (k * classes + c) * tn;
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let o = ((t[0] + z) * padded[1] + t[1] + y) * padded[2] + t[2];
                        let p = base + (z * patch[1] + y) * patch[2];
                        for x in 0..patch[2] {
                            sum[c * pn + o + x] += probs.data()[p + x];
                        }
                    }
                }
            }
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let o = ((t[0] + z) * padded[1] + t[1] + y) * padded[2] + t[2];
                    count[o..o + patch[2]].iter_mut().for_each(|n| *n += 1);
                }
            }
        }
    }

    let n: usize = e.iter().product();
    let mut data = vec![0.0; classes * n];
    for c in 0..classes {
        for z in 0..e[0] {
            for y in 0..e[1] {
                let o = (z * padded[1] + y) * padded[2];
                let d = c * n + image.index(z, y, 0);
                for x in 0..e[2] {
                    data[d + x] = sum[c * pn + o + x] / f64::from(count[o + x]);
                }
            }
        }
    }
    Ok(SoftmaxVolume {
        extents: e,
        spacing: image.spacing(),
        channels: classes,
        data,
    })
}

/// Voxelwise mean over ensemble members, accumulated as a running mean so
/// identical members reproduce themselves exactly.
pub fn ensemble_softmax(members: &[SoftmaxVolume]) -> Result<SoftmaxVolume> {
    let first = members.first().ok_or_else(|| contract!("empty ensemble"))?;
    for m in &members[1..] {
        ensure!(
            m.extents == first.extents && m.spacing == first.spacing && m.channels == first.channels,
            "ensemble members disagree on geometry: {:?}/{:?} vs {:?}/{:?}",
            m.extents,
            m.spacing,
            first.extents,
            first.spacing
        );
    }
    let mut mean = first.data.clone();
    for (k, m) in members.iter().enumerate().skip(1) {
        let inv = 1.0 / (k + 1) as f64;
        for (a, &b) in mean.iter_mut().zip(&m.data) {
            *a += (b - *a) * inv;
        }
    }
    Ok(SoftmaxVolume {
        data: mean,
        ..first.clone()
    })
}

/// Resamples every channel (trilinear) onto `original` and takes the
/// per-voxel argmax, ties to the lowest class.
pub fn restore_original_geometry(soft: &SoftmaxVolume, original: Option<Geometry>) -> Result<Volume> {
    let original = original.ok_or_else(|| contract!("no original geometry recorded"))?;
    let restored = if original.extents == soft.extents && original.spacing == soft.spacing {
        soft.clone()
    } else {
        let step: [f64; 3] = core::array::from_fn(|a| original.spacing[a] / soft.spacing[a]);
        let n = soft.voxels();
        let mut data = Vec::with_capacity(soft.channels * original.voxels());
        for c in 0..soft.channels {
            data.extend(resample_grid(
                &soft.data[c * n..(c + 1) * n],
                soft.extents,
                original.extents,
                step,
                Interpolation::Trilinear,
            ));
        }
        SoftmaxVolume {
            extents: original.extents,
            spacing: original.spacing,
            channels: soft.channels,
            data,
        }
    };
    let labels = restored.argmax();
    ensure!(
        labels.iter().all(|&l| l <= 2),
        "restored labels exceed the kidney/tumor label set"
    );
    Volume::labels(original.extents, original.spacing, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_along_one_axis() {
        assert_eq!(tile_positions(64, 64), vec![0]);
        assert_eq!(tile_positions(100, 64), vec![0, 32, 36]);
        assert_eq!(tile_positions(96, 64), vec![0, 32]);
        assert_eq!(tile_positions(10, 64), vec![0]);
    }

    #[test]
    fn two_member_mean() {
        let m = |a: f64, b: f64| SoftmaxVolume {
            extents: [1, 1, 1],
            spacing: [1.0; 3],
            channels: 2,
            data: vec![a, b],
        };
        let e = ensemble_softmax(&[m(0.2, 0.8), m(0.6, 0.4)]).unwrap();
        assert!((e.data[0] - 0.4).abs() < 1e-15 && (e.data[1] - 0.6).abs() < 1e-15);
        let same = ensemble_softmax(&vec![m(0.1, 0.9); 5]).unwrap();
        assert_eq!(same, m(0.1, 0.9));
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = SoftmaxVolume {
            extents: [1, 1, 2],
            spacing: [1.0; 3],
            channels: 3,
            data: vec![1.0 / 3.0, 0.2, 1.0 / 3.0, 0.2, 1.0 / 3.0, 0.6],
        };
        assert_eq!(s.argmax(), vec![0, 2]);
        let v = restore_original_geometry(&s, Some(Geometry::new([1, 1, 2], [1.0; 3]).unwrap())).unwrap();
        assert_eq!(v.label_bytes().unwrap(), vec![0, 2]);
        assert!(restore_original_geometry(&s, None).is_err());
    }
}
