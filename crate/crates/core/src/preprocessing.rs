//! Dataset fingerprinting, resampling to a common spacing and CT intensity
//! normalization.
//!
//! Resampling maps output index `i` to the continuous input index
//! `i * target / source` per axis (grids aligned at the first voxel), reading
//! past the last voxel as the last voxel. Equal spacings therefore reproduce
//! the input bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::math;
use crate::volume::{CaseRecord, CaseStatus, Geometry, Volume, VolumeKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessPlan {
    pub target_spacing: [f64; 3],
    pub clip_range: (f64, f64),
    pub shift: f64,
    pub scale: f64,
}

impl Default for PreprocessPlan {
    fn default() -> Self {
        Self {
            target_spacing: [3.22, 1.62, 1.62],
            clip_range: (-79.0, 304.0),
            shift: 101.0,
            scale: 76.9,
        }
    }
}

impl PreprocessPlan {
    pub fn with_spacing(target_spacing: [f64; 3]) -> Result<Self> {
        let plan = Self {
            target_spacing,
            ..Self::default()
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.target_spacing.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.clip_range.0 < self.clip_range.1
            && self.scale.is_finite()
            && self.scale > 0.0
            && self.shift.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid preprocessing plan {:?}", self)))
        }
    }

    /// Stable textual form; hashing it identifies caches built with this plan.
    pub fn canonical(&self) -> String {
        format!(
            "target_spacing={:?},{:?},{:?};clip={:?},{:?};shift={:?};scale={:?}",
            self.target_spacing[0],
            self.target_spacing[1],
            self.target_spacing[2],
            self.clip_range.0,
            self.clip_range.1,
            self.shift,
            self.scale
        )
    }

    /// Bounds of [`normalize_ct`] output.
    pub fn normalized_range(&self) -> (f64, f64) {
        (
            (self.clip_range.0 - self.shift) / self.scale,
            (self.clip_range.1 - self.shift) / self.scale,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fingerprint {
    pub median_spacing: [f64; 3],
    pub median_resampled_shape: [usize; 3],
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
fn lower_median<T: Copy + PartialOrd>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v[(v.len() - 1) / 2]
}

/// Per-axis lower medians of spacing and of the extents each case would
/// have after resampling under `plan`.
pub fn dataset_fingerprint(cases: &[CaseRecord], plan: &PreprocessPlan) -> Result<Fingerprint> {
    let geometries: Vec<Geometry> = cases.iter().map(|c| c.image.geometry()).collect();
    fingerprint_from_geometries(&geometries, plan)
}

/// [`dataset_fingerprint`] from image geometries alone.
pub fn fingerprint_from_geometries(geometries: &[Geometry], plan: &PreprocessPlan) -> Result<Fingerprint> {
    ensure!(!geometries.is_empty(), "fingerprint of an empty dataset");
    let mut median_spacing = [0.0; 3];
    let mut median_resampled_shape = [0; 3];
    for a in 0..3 {
        median_spacing[a] = lower_median(geometries.iter().map(|g| g.spacing[a]).collect());
        median_resampled_shape[a] = lower_median(
            geometries
                .iter()
                .map(|g| resampled_extent(g.extents[a], g.spacing[a], plan.target_spacing[a]))
                .collect(),
        );
    }
    Ok(Fingerprint {
        median_spacing,
        median_resampled_shape,
    })
}

/// `max(1, round(extent * spacing / target))`, rounding half away from zero.
pub fn resampled_extent(extent: usize, spacing: f64, target: f64) -> usize {
    (math::round(extent as f64 * spacing / target) as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Per-axis sampling table: `(i0, i1, frac)` for every output index.
fn axis_table(out: usize, input: usize, step: f64) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let pos = (i as f64 * step).min((input - 1) as f64);
            let i0 = math::floor(pos) as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// `a + f * (b - a)`: exact for `f == 0` and for `a == b`.
#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + f * (b - a)
}

/// Resamples a `[D, H, W]` grid to `out` extents, sampling input index
/// `i * step[axis]`.
pub fn resample_grid(
    data: &[f64],
    input: [usize; 3],
    out: [usize; 3],
    step: [f64; 3],
    mode: Interpolation,
) -> Vec<f64> {
    let tables: Vec<_> = (0..3).map(|a| axis_table(out[a], input[a], step[a])).collect();
    let [d, h, w] = input;
    match mode {
        Interpolation::Nearest => {
            let pick = |t: &[(usize, usize, f64)]| -> Vec<usize> {
                t.iter().map(|&(i0, i1, f)| if f >= 0.5 { i1 } else { i0 }).collect()
            };
            let (tz, ty, tx) = (pick(&tables[0]), pick(&tables[1]), pick(&tables[2]));
            let mut res = Vec::with_capacity(out.iter().product());
            for &z in &tz {
                for &y in &ty {
                    let row = (z * h + y) * w;
                    res.extend(tx.iter().map(|&x| data[row + x]));
                }
            }
            res
        }
        Interpolation::Trilinear => {
            // Separable: width, then height, then depth.
            let mut sx = vec![0.0; d * h * out[2]];
            for (r, dst) in sx.chunks_mut(out[2]).enumerate() {
                let src = &data[r * w..(r + 1) * w];
                for (v, &(i0, i1, f)) in dst.iter_mut().zip(&tables[2]) {
                    *v = lerp(src[i0], src[i1], f);
                }
            }
            let plane = out[2];
            let mut sy = vec![0.0; d * out[1] * plane];
            for z in 0..d {
                for (y, &(i0, i1, f)) in tables[1].iter().enumerate() {
                    let a = &sx[(z * h + i0) * plane..(z * h + i0 + 1) * plane];
                    let b = &sx[(z * h + i1) * plane..(z * h + i1 + 1) * plane];
                    let dst = &mut sy[(z * out[1] + y) * plane..(z * out[1] + y + 1) * plane];
                    for ((v, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                        *v = lerp(p, q, f);
                    }
                }
            }
            let slab = out[1] * plane;
            let mut res = vec![0.0; out[0] * slab];
            for (z, &(i0, i1, f)) in tables[0].iter().enumerate() {
                let a = &sy[i0 * slab..(i0 + 1) * slab];
                let b = &sy[i1 * slab..(i1 + 1) * slab];
                for ((v, &p), &q) in res[z * slab..(z + 1) * slab].iter_mut().zip(a).zip(b) {
                    *v = lerp(p, q, f);
                }
            }
            res
        }
    }
}

/// Resamples `vol` onto the grid with spacing `target` covering the same
/// physical extent.
pub fn resample_to_spacing(vol: &Volume, target: [f64; 3], mode: Interpolation) -> Result<Volume> {
    ensure!(
        target.iter().all(|t| t.is_finite() && *t > 0.0),
        "resampling target spacing {:?} must be positive",
        target
    );
    let src = vol.spacing();
    let extents = vol.extents();
    let out: [usize; 3] = core::array::from_fn(|a| resampled_extent(extents[a], src[a], target[a]));
    let step: [f64; 3] = core::array::from_fn(|a| target[a] / src[a]);
    resample_geometry(
        vol,
        Geometry {
            extents: out,
            spacing: target,
        },
        step,
        mode,
    )
}

/// Resamples `vol` onto exactly `geometry`, used to return to a recorded
/// original grid.
pub fn resample_to_geometry(vol: &Volume, geometry: Geometry, mode: Interpolation) -> Result<Volume> {
    let src = vol.spacing();
    let step: [f64; 3] = core::array::from_fn(|a| geometry.spacing[a] / src[a]);
    resample_geometry(vol, geometry, step, mode)
}

fn resample_geometry(vol: &Volume, geometry: Geometry, step: [f64; 3], mode: Interpolation) -> Result<Volume> {
    let data = resample_grid(vol.data(), vol.extents(), geometry.extents, step, mode);
    Volume::new(geometry.extents, geometry.spacing, data, vol.kind())
}

/// `(clamp(x, lo, hi) - shift) / scale` on an image volume.
pub fn normalize_ct(vol: &Volume, plan: &PreprocessPlan) -> Result<Volume> {
    ensure!(vol.kind() == VolumeKind::Image, "normalize_ct on a label volume");
    let (lo, hi) = plan.clip_range;
    let data = vol
        .data()
        .iter()
        .map(|&x| (x.clamp(lo, hi) - plan.shift) / plan.scale)
        .collect();
    Volume::image(vol.extents(), vol.spacing(), data)
}

/// Resamples image (trilinear) and labels (nearest) to the plan spacing and
/// normalizes the image. The input geometry is kept in `original`.
pub fn preprocess_case(case: &CaseRecord, plan: &PreprocessPlan) -> Result<CaseRecord> {
    plan.validate()?;
    ensure!(
        matches!(case.status, CaseStatus::Included | CaseStatus::Substituted),
        "case {} has status {:?} and cannot be preprocessed",
        case.case_id,
        case.status
    );
    let image = resample_to_spacing(&case.image, plan.target_spacing, Interpolation::Trilinear)?;
    let image = normalize_ct(&image, plan)?;
    let labels = case
        .labels
        .as_ref()
        .map(|l| resample_to_spacing(l, plan.target_spacing, Interpolation::Nearest))
        .transpose()?;
    Ok(CaseRecord {
        case_id: case.case_id,
        image,
        labels,
        status: case.status,
        original: Some(case.original.unwrap_or_else(|| case.image.geometry())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_constants() {
        let plan = PreprocessPlan::default();
        let v = Volume::image([1, 1, 3], [1.0; 3], vec![-100.0, 101.0, 400.0]).unwrap();
        let n = normalize_ct(&v, &plan).unwrap();
        let expect = [-180.0 / 76.9, 0.0, 203.0 / 76.9];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((n.data()[0] + 2.3407).abs() < 1e-4);
        assert!((n.data()[2] - 2.6398).abs() < 1e-4);
    }

    #[test]
    fn normalize_rejects_labels() {
        let l = Volume::labels([1, 1, 1], [1.0; 3], &[1]).unwrap();
        assert!(normalize_ct(&l, &PreprocessPlan::default()).is_err());
    }

    #[test]
    fn extent_formula() {
        assert_eq!(resampled_extent(512, 0.8, 1.62), 253);
        assert_eq!(resampled_extent(1, 0.1, 5.0), 1);
        assert_eq!(resampled_extent(5, 1.0, 2.0), 3);
    }

    #[test]
    fn lower_median_of_even_count() {
        assert_eq!(lower_median(vec![4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(vec![3, 1, 2]), 2);
    }

    #[test]
    fn identity_resampling_is_exact() {
        let data: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let v = Volume::image([3, 4, 5], [2.0, 1.5, 0.7], data).unwrap();
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample_to_spacing(&v, v.spacing(), mode).unwrap();
            assert_eq!(r, v);
        }
    }

    #[test]
    fn upsampling_interpolates_linearly() {
        let v = Volume::image([1, 1, 2], [1.0, 1.0, 2.0], vec![0.0, 4.0]).unwrap();
        let r = resample_to_spacing(&v, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn bad_plan_is_rejected() {
        assert!(PreprocessPlan::with_spacing([1.0, 0.0, 1.0]).is_err());
        let v = Volume::image([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        assert!(resample_to_spacing(&v, [1.0, -1.0, 1.0], Interpolation::Nearest).is_err());
    }
}
