//! Kidney/tumor phantoms: two ellipsoid kidneys in noisy background, each
//! possibly holding a spherical tumor clipped to the kidney.
//!
//! Intensities are in Hounsfield-like units. Boundaries get partial-volume
//! averaging: the noiseless tissue-mean image is smoothed with a 3x3x3 box
//! before per-voxel noise is added.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::volume::{CaseRecord, Volume};
use crate::{math, rng};

/// Mean and standard deviation of a tissue intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tissue {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub kidney_count: usize,
    pub kidney: Tissue,
    pub tumor: Tissue,
    pub background: Tissue,
    pub tumor_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            extents: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            kidney_count: 2,
            kidney: Tissue { mean: 120.0, std: 20.0 },
            tumor: Tissue { mean: 45.0, std: 15.0 },
            background: Tissue { mean: 0.0, std: 30.0 },
            tumor_probability: 0.8,
            seed: 0,
        }
    }
}

/// Placement of the generated structures, in millimetres from the first
/// voxel centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub kidneys: Vec<Ellipsoid>,
    /// `(kidney index, sphere)`.
    pub tumors: Vec<(usize, Sphere)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub centre: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// `Σ ((p - c) / r)^2`; below 1 inside.
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.centre[a]) / self.radii[a];
                d * d
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub centre: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| (p[a] - self.centre[a]) * (p[a] - self.centre[a]))
            .sum::<f64>()
            < self.radius * self.radius
    }
}

fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    lo + r.random::<f64>() * (hi - lo)
}

/// Draws kidney and tumor placement for `case_id`.
pub fn draw_layout(spec: &SynthSpec, case_id: u32) -> Layout {
    let mut r = rng::stream(spec.seed, &[0x5_1A7, u64::from(case_id), 0]);
    let size: [f64; 3] = core::array::from_fn(|a| (spec.extents[a] - 1) as f64 * spec.spacing[a]);
    let mut kidneys = Vec::new();
    let mut tumors = Vec::new();
    for k in 0..spec.kidney_count {
        // Kidneys sit side by side along the width axis.
        let slot = (k as f64 + 0.5) / spec.kidney_count as f64;
        let radii = [
            size[0] * uniform(&mut r, 0.22, 0.30),
            size[1] * uniform(&mut r, 0.16, 0.22),
            size[2] * uniform(&mut r, 0.12, 0.16).min(0.45 / spec.kidney_count as f64),
        ];
        let centre = [
            size[0] * uniform(&mut r, 0.42, 0.58),
            size[1] * uniform(&mut r, 0.40, 0.60),
            size[2] * (slot + uniform(&mut r, -0.04, 0.04)),
        ];
        let kidney = Ellipsoid { centre, radii };
        let has_tumor = r.random::<f64>() < spec.tumor_probability;
        // Tumor centre: a point at normalized radius <= 0.5 inside the kidney.
        let dir: [f64; 3] = core::array::from_fn(|_| uniform(&mut r, -1.0, 1.0));
        let norm = math::sqrt(dir.iter().map(|d| d * d).sum::<f64>()).max(1e-9);
        let t = uniform(&mut r, 0.0, 0.5);
        let radius_frac = uniform(&mut r, 0.5, 0.8);
        if has_tumor {
            let c: [f64; 3] = core::array::from_fn(|a| centre[a] + radii[a] * t * dir[a] / norm);
            let min_r = radii.iter().copied().fold(f64::INFINITY, f64::min);
            tumors.push((
                k,
                Sphere {
                    centre: c,
                    radius: min_r * radius_frac,
                },
            ));
        }
        kidneys.push(kidney);
    }
    Layout { kidneys, tumors }
}

/// Rasterizes `layout` into labels by voxel centre.
pub fn rasterize(spec: &SynthSpec, layout: &Layout) -> Vec<u8> {
    let e = spec.extents;
    let mut labels = vec![0u8; e.iter().product()];
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let p = [
                    z as f64 * spec.spacing[0],
                    y as f64 * spec.spacing[1],
                    x as f64 * spec.spacing[2],
                ];
                let i = (z * e[1] + y) * e[2] + x;
                for (k, kidney) in layout.kidneys.iter().enumerate() {
                    if kidney.level(p) < 1.0 {
                        let tumor = layout.tumors.iter().any(|(tk, s)| *tk == k && s.contains(p));
                        labels[i] = labels[i].max(if tumor { 2 } else { 1 });
                    }
                }
            }
        }
    }
    labels
}

fn box_blur(data: &[f64], e: [usize; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [e[1] * e[2], e[2], 1];
    for a in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, v) in next.iter_mut().enumerate() {
            let coord = (i / strides[a]) % e[a];
            let mut sum = cur[i];
            let mut n = 1.0;
            if coord > 0 {
                sum += cur[i - strides[a]];
                n += 1.0;
            }
            if coord + 1 < e[a] {
                sum += cur[i + strides[a]];
                n += 1.0;
            }
            *v = sum / n;
        }
        cur = next;
    }
    cur
}

/// Generates one case, deterministic in `(spec.seed, case_id)`.
pub fn generate_case(spec: &SynthSpec, case_id: u32) -> Result<CaseRecord> {
    ensure!(
        spec.extents.iter().all(|&e| e >= 32),
        "synthetic extents {:?} must be at least 32 per axis",
        spec.extents
    );
    ensure!(spec.kidney_count >= 1, "at least one kidney is required");
    ensure!(
        (0.0..=1.0).contains(&spec.tumor_probability),
        "tumor probability {} outside [0, 1]",
        spec.tumor_probability
    );
    let layout = draw_layout(spec, case_id);
    let labels = rasterize(spec, &layout);
    let tissue = |l: u8| match l {
        0 => spec.background,
        1 => spec.kidney,
        _ => spec.tumor,
    };
    let means: Vec<f64> = labels.iter().map(|&l| tissue(l).mean).collect();
    let smooth = box_blur(&means, spec.extents);
    let mut r = rng::stream(spec.seed, &[0x5_1A7, u64::from(case_id), 1]);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let image: Vec<f64> = smooth
        .iter()
        .zip(&labels)
        .map(|(&m, &l)| m + tissue(l).std * std_normal.sample(&mut r))
        .collect();
    let image = Volume::image(spec.extents, spec.spacing, image)?;
    let labels = Volume::labels(spec.extents, spec.spacing, &labels)?;
    CaseRecord::new(case_id, image, Some(labels))
}
