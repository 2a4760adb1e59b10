//! Patch sampling with foreground oversampling, and spatial and intensity
//! augmentation of training patches.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::math;
use crate::rng::Rng;
use crate::volume::CaseRecord;

/// Closed range `[lo, hi]` applied with probability `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranged {
    pub lo: f64,
    pub hi: f64,
    pub p: f64,
}

impl Ranged {
    pub const fn new(lo: f64, hi: f64, p: f64) -> Self {
        Self { lo, hi, p }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi && (0.0..=1.0).contains(&self.p)
    }

    /// Draws a value when the probability fires, `None` otherwise. Always
    /// consumes the same number of draws from `rng`.
    fn draw(&self, rng: &mut Rng) -> Option<f64> {
        let fire = rng.random::<f64>() < self.p;
        let u = rng.random::<f64>();
        fire.then_some(self.lo + u * (self.hi - self.lo))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Degrees, drawn independently about each axis.
    pub rotation_deg: Ranged,
    /// Isotropic zoom factor.
    pub scale: Ranged,
    pub brightness: Ranged,
    pub contrast: Ranged,
    pub gamma: Ranged,
    pub noise_sigma: Ranged,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_deg: Ranged::new(-30.0, 30.0, 0.2),
            scale: Ranged::new(0.85, 1.25, 0.2),
            brightness: Ranged::new(0.75, 1.25, 0.15),
            contrast: Ranged::new(0.75, 1.25, 0.15),
            gamma: Ranged::new(0.7, 1.5, 0.3),
            noise_sigma: Ranged::new(0.0, 0.1, 0.1),
        }
    }
}

impl AugmentParams {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let off = |r: Ranged| Ranged { p: 0.0, ..r };
        let d = Self::default();
        Self {
            rotation_deg: off(d.rotation_deg),
            scale: off(d.scale),
            brightness: off(d.brightness),
            contrast: off(d.contrast),
            gamma: off(d.gamma),
            noise_sigma: off(d.noise_sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rotation_deg,
            self.scale,
            self.brightness,
            self.contrast,
            self.gamma,
            self.noise_sigma,
        ];
        ensure!(
            all.iter().all(Ranged::valid),
            "augmentation ranges must be ordered with probabilities in [0, 1]: {:?}",
            self
        );
        ensure!(
            self.scale.lo > 0.0 && self.gamma.lo > 0.0 && self.noise_sigma.lo >= 0.0,
            "scale and gamma must be positive, noise non-negative"
        );
        Ok(())
    }
}

/// Image and label patch on a common `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub extents: [usize; 3],
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Start of the patch window along one axis. Shorter axes are centred with
/// `(patch - extent) / 2` voxels of padding before the data.
fn window_start(extent: usize, patch: usize, anchor: Option<usize>, rng: &mut Rng) -> isize {
    if extent <= patch {
        return -(((patch - extent) / 2) as isize);
    }
    let max = extent - patch;
    match anchor {
        Some(v) => (v as isize - (patch / 2) as isize).clamp(0, max as isize),
        None => rng.random_range(0..=max) as isize,
    }
}

/// Cuts a `patch` window out of a preprocessed case. With
/// `force_foreground` and any foreground present, the window is centred on
/// a uniformly drawn foreground voxel, shifted only as far as needed to stay
/// inside the volume. Reads outside the volume give image 0 and background.
pub fn sample_patch(case: &CaseRecord, patch: [usize; 3], force_foreground: bool, rng: &mut Rng) -> Result<Patch> {
    let labels = case
        .labels
        .as_ref()
        .ok_or_else(|| crate::error::contract!("case {} has no labels to train on", case.case_id))?;
    ensure!(patch.iter().all(|&p| p > 0), "empty patch size {:?}", patch);
    let e = case.image.extents();
    let anchor = if force_foreground {
        let count = labels.data().iter().filter(|&&v| v > 0.0).count();
        if count > 0 {
            let k = rng.random_range(0..count);
            let flat = labels
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .nth(k)
                .map(|(i, _)| i)
                .expect("k < count");
            Some([flat / (e[1] * e[2]), (flat / e[2]) % e[1], flat % e[2]])
        } else {
            None
        }
    } else {
        None
    };
    let start: [isize; 3] = core::array::from_fn(|a| window_start(e[a], patch[a], anchor.map(|v| v[a]), rng));
    let n = patch.iter().product();
    let mut image = vec![0.0; n];
    let mut out_labels = vec![0u8; n];
    for z in 0..patch[0] {
        let sz = start[0] + z as isize;
        if sz < 0 || sz >= e[0] as isize {
            continue;
        }
        for y in 0..patch[1] {
            let sy = start[1] + y as isize;
            if sy < 0 || sy >= e[1] as isize {
                continue;
            }
            for x in 0..patch[2] {
                let sx = start[2] + x as isize;
                if sx < 0 || sx >= e[2] as isize {
                    continue;
                }
                let src = case.image.index(sz as usize, sy as usize, sx as usize);
                let dst = (z * patch[1] + y) * patch[2] + x;
                image[dst] = case.image.data()[src];
                out_labels[dst] = labels.data()[src] as u8;
            }
        }
    }
    Ok(Patch {
        extents: patch,
        image,
        labels: out_labels,
    })
}

/// Rotation (radians about the depth, height and width axes, applied in
/// that order) composed with an isotropic zoom, about the patch centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialTransform {
    pub angles: [f64; 3],
    pub zoom: f64,
}

impl SpatialTransform {
    pub const IDENTITY: Self = Self {
        angles: [0.0; 3],
        zoom: 1.0,
    };

    /// Forward matrix acting on `(z, y, x)` offsets from the centre.
    fn matrix(&self) -> [[f64; 3]; 3] {
        let rot = |axis: usize, t: f64| {
            let (s, c) = (math::sin(t), math::cos(t));
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut m = [[0.0; 3]; 3];
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[j][j] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut m = [[0.0; 3]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
                }
            }
            m
        };
        let r = mul(
            rot(2, self.angles[2]),
            mul(rot(1, self.angles[1]), rot(0, self.angles[0])),
        );
        r.map(|row| row.map(|v| v * self.zoom))
    }
}

/// Draws the spatial transform, or `None` when neither rotation nor
/// scaling fires.
pub fn draw_spatial(params: &AugmentParams, rng: &mut Rng) -> Option<SpatialTransform> {
    let fire = rng.random::<f64>() < params.rotation_deg.p;
    let degrees: [f64; 3] = core::array::from_fn(|_| {
        let u = rng.random::<f64>();
        params.rotation_deg.lo + u * (params.rotation_deg.hi - params.rotation_deg.lo)
    });
    let zoom = params.scale.draw(rng);
    if !fire && zoom.is_none() {
        return None;
    }
    let angles = if fire {
        degrees.map(|d| d.to_radians())
    } else {
        [0.0; 3]
    };
    Some(SpatialTransform {
        angles,
        zoom: zoom.unwrap_or(1.0),
    })
}

/// Resamples the patch under `t`: output voxel `o` reads the input at
/// `c + M^-1 (o - c)`, trilinear for the image (0 outside) and nearest for
/// labels (background outside).
pub fn apply_spatial(patch: &Patch, t: &SpatialTransform) -> Patch {
    let e = patch.extents;
    let m = t.matrix();
    // M is a scaled rotation, so its inverse is the transpose over zoom^2.
    let inv: [[f64; 3]; 3] = core::array::from_fn(|r| core::array::from_fn(|c| m[c][r] / (t.zoom * t.zoom)));
    let centre: [f64; 3] = core::array::from_fn(|a| (e[a] as f64 - 1.0) / 2.0);
    let n = e.iter().product();
    let mut image = vec![0.0; n];
    let mut labels = vec![0u8; n];
    let at = |z: isize, y: isize, x: isize| -> Option<usize> {
        let inside = z >= 0 && y >= 0 && x >= 0 && (z as usize) < e[0] && (y as usize) < e[1] && (x as usize) < e[2];
        inside.then(|| (z as usize * e[1] + y as usize) * e[2] + x as usize)
    };
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let o = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                let p: [f64; 3] = core::array::from_fn(|r| centre[r] + (0..3).map(|k| inv[r][k] * o[k]).sum::<f64>());
                let dst = (z * e[1] + y) * e[2] + x;

                let rz = math::round(p[0]) as isize;
                let ry = math::round(p[1]) as isize;
                let rx = math::round(p[2]) as isize;
                if let Some(i) = at(rz, ry, rx) {
                    labels[dst] = patch.labels[i];
                }

                let f: [f64; 3] = p.map(math::floor);
                let base = f.map(|v| v as isize);
                let w = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
                let mut acc = 0.0;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - w[0] } else { w[0] };
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - w[1] } else { w[1] };
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - w[2] } else { w[2] };
                            if let Some(i) = at(base[0] + dz, base[1] + dy, base[2] + dx) {
                                acc += wz * wy * wx * patch.image[i];
                            }
                        }
                    }
                }
                image[dst] = acc;
            }
        }
    }
    Patch {
        extents: e,
        image,
        labels,
    }
}

/// Draws and applies one spatial transform; unchanged when none fires.
pub fn spatial_augment(patch: Patch, params: &AugmentParams, rng: &mut Rng) -> Patch {
    match draw_spatial(params, rng) {
        Some(t) => apply_spatial(&patch, &t),
        None => patch,
    }
}

/// Drawn intensity transforms; `None` entries are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntensityDraw {
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub gamma: Option<f64>,
    pub noise_sigma: Option<f64>,
}

pub fn draw_intensity(params: &AugmentParams, rng: &mut Rng) -> IntensityDraw {
    IntensityDraw {
        brightness: params.brightness.draw(rng),
        contrast: params.contrast.draw(rng),
        gamma: params.gamma.draw(rng),
        noise_sigma: params.noise_sigma.draw(rng),
    }
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Brightness, contrast, gamma, then Gaussian noise (drawn from `rng`).
pub fn apply_intensity(image: &mut [f64], draw: &IntensityDraw, rng: &mut Rng) {
    if image.is_empty() {
        return;
    }
    if let Some(b) = draw.brightness {
        image.iter_mut().for_each(|v| *v *= b);
    }
    if let Some(c) = draw.contrast {
        let mean = image.iter().sum::<f64>() / image.len() as f64;
        let (lo, hi) = min_max(image);
        image
            .iter_mut()
            .for_each(|v| *v = (mean + c * (*v - mean)).clamp(lo, hi));
    }
    if let Some(g) = draw.gamma {
        let (lo, hi) = min_max(image);
        let range = hi - lo;
        if range > 0.0 {
            image
                .iter_mut()
                .for_each(|v| *v = lo + range * math::powf((*v - lo) / range, g));
        }
    }
    if let Some(sigma) = draw.noise_sigma {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            image.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
}

pub fn intensity_augment(image: &mut [f64], params: &AugmentParams, rng: &mut Rng) {
    let draw = draw_intensity(params, rng);
    apply_intensity(image, &draw, rng);
}

/// Spatial then intensity augmentation.
pub fn augment(patch: Patch, params: &AugmentParams, rng: &mut Rng) -> Patch {
    let mut p = spatial_augment(patch, params, rng);
    intensity_augment(&mut p.image, params, rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::Volume;

    fn case(e: [usize; 3], fg: &[usize]) -> CaseRecord {
        let n = e.iter().product();
        let img = Volume::image(e, [1.0; 3], (0..n).map(|i| i as f64).collect()).unwrap();
        let mut l = vec![0u8; n];
        for &i in fg {
            l[i] = 2;
        }
        let lab = Volume::labels(e, [1.0; 3], &l).unwrap();
        CaseRecord::new(0, img, Some(lab)).unwrap()
    }

    #[test]
    fn whole_volume_patch() {
        let c = case([4, 4, 4], &[]);
        let p = sample_patch(&c, [4, 4, 4], false, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(p.image, c.image.data());
    }

    #[test]
    fn small_volume_is_centred_with_padding() {
        let c = case([8, 8, 8], &[]);
        let p = sample_patch(&c, [16, 16, 16], false, &mut rng::stream(1, &[])).unwrap();
        let at = |z: usize, y: usize, x: usize| p.image[(z * 16 + y) * 16 + x];
        assert_eq!(at(4, 4, 4), 0.0);
        assert_eq!(at(4, 4, 5), 1.0);
        assert_eq!(at(11, 11, 11), 511.0);
        assert_eq!(at(3, 8, 8), 0.0);
        assert_eq!(at(12, 8, 8), 0.0);
    }

    #[test]
    fn forced_foreground_contains_the_voxel() {
        let e = [20, 30, 40];
        let target = (17 * 30 + 2) * 40 + 39;
        let c = case(e, &[target]);
        for seed in 0..20 {
            let p = sample_patch(&c, [8, 8, 8], true, &mut rng::stream(seed, &[])).unwrap();
            assert_eq!(p.labels.iter().filter(|&&l| l == 2).count(), 1);
            let idx = p.labels.iter().position(|&l| l == 2).unwrap();
            assert_eq!(p.image[idx], target as f64);
        }
    }

    #[test]
    fn identity_intensity_draw() {
        let mut x = vec![0.5, -1.0, 2.0];
        let d = IntensityDraw {
            brightness: Some(1.0),
            contrast: Some(1.0),
            gamma: Some(1.0),
            noise_sigma: Some(0.0),
        };
        apply_intensity(&mut x, &d, &mut rng::stream(0, &[]));
        assert_eq!(x, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn brightness_on_constant_patch() {
        let mut x = vec![1.0; 8];
        let d = IntensityDraw {
            brightness: Some(1.25),
            ..Default::default()
        };
        apply_intensity(&mut x, &d, &mut rng::stream(0, &[]));
        assert!(x.iter().all(|&v| v == 1.25));
    }

    #[test]
    fn gamma_on_unit_range() {
        let mut x = vec![0.0, 0.5, 1.0];
        let d = IntensityDraw {
            gamma: Some(2.0),
            ..Default::default()
        };
        apply_intensity(&mut x, &d, &mut rng::stream(0, &[]));
        assert_eq!(x, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn disabled_params_leave_patch_untouched() {
        let c = case([6, 6, 6], &[5, 100]);
        let p = sample_patch(&c, [6, 6, 6], false, &mut rng::stream(3, &[])).unwrap();
        let q = augment(p.clone(), &AugmentParams::disabled(), &mut rng::stream(4, &[]));
        assert_eq!(p, q);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = AugmentParams::default();
        assert!(p.validate().is_ok());
        p.gamma = Ranged::new(1.5, 0.7, 0.3);
        assert!(p.validate().is_err());
        p = AugmentParams::default();
        p.noise_sigma.p = 1.5;
        assert!(p.validate().is_err());
    }
}
