//! Scalar 3D volumes with physical spacing, and dataset case records.
//!
//! Axis order is `(depth, height, width)` with width varying fastest in
//! memory; spacing is in millimetres per voxel in the same order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};

/// Labels are `0` background, `1` kidney, `2` tumor.
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Image,
    Labels,
}

/// Extents plus spacing: everything needed to place a grid in space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(extents: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        if extents.contains(&0) {
            return Err(Error::Validation(format!("zero extent in {:?}", extents)));
        }
        Ok(Self { extents, spacing })
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Validation(format!("spacing {:?} must be positive", spacing)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    kind: VolumeKind,
}

impl Volume {
    /// Validates the invariants: positive spacing, matching length, and for
    /// labels only the values 0, 1 and 2.
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        let geometry = Geometry::new(extents, spacing)?;
        if geometry.voxels() != data.len() {
            return Err(Error::Validation(format!(
                "extents {:?} need {} values, got {}",
                extents,
                geometry.voxels(),
                data.len()
            )));
        }
        if kind == VolumeKind::Labels {
            if let Some(bad) = data.iter().find(|&&v| !(v == 0.0 || v == 1.0 || v == 2.0)) {
                return Err(Error::Validation(format!("label value {} outside {{0, 1, 2}}", bad)));
            }
        }
        Ok(Self {
            extents,
            spacing,
            data,
            kind,
        })
    }

    pub fn image(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(extents, spacing, data, VolumeKind::Image)
    }

    pub fn labels(extents: [usize; 3], spacing: [f64; 3], labels: &[u8]) -> Result<Self> {
        Self::new(
            extents,
            spacing,
            labels.iter().map(|&l| f64::from(l)).collect(),
            VolumeKind::Labels,
        )
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            extents: self.extents,
            spacing: self.spacing,
        }
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    /// Label values as bytes. Image volumes are rejected.
    pub fn label_bytes(&self) -> Result<Vec<u8>> {
        ensure!(self.kind == VolumeKind::Labels, "label_bytes on an image volume");
        Ok(self.data.iter().map(|&v| v as u8).collect())
    }

    /// Same data with a different spacing.
    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaseStatus {
    Included,
    Excluded,
    /// Reference labels were replaced.
    Substituted,
    /// Marked for replacement but no replacement labels were supplied.
    SubstitutedPending,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: u32,
    pub image: Volume,
    pub labels: Option<Volume>,
    pub status: CaseStatus,
    /// Geometry before preprocessing; set by the preprocessing stage.
    pub original: Option<Geometry>,
}

impl CaseRecord {
    pub fn new(case_id: u32, image: Volume, labels: Option<Volume>) -> Result<Self> {
        ensure!(
            image.kind() == VolumeKind::Image,
            "case {} image has label kind",
            case_id
        );
        if let Some(l) = &labels {
            ensure!(
                l.kind() == VolumeKind::Labels,
                "case {} labels have image kind",
                case_id
            );
            ensure!(
                l.extents() == image.extents(),
                "case {}: label extents {:?} differ from image extents {:?}",
                case_id,
                l.extents(),
                image.extents()
            );
        }
        Ok(Self {
            case_id,
            image,
            labels,
            status: CaseStatus::Included,
            original: None,
        })
    }

    pub fn is_usable(&self) -> bool {
        matches!(self.status, CaseStatus::Included | CaseStatus::Substituted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn label_values_are_validated() {
        assert!(Volume::labels([1, 1, 3], [1.0; 3], &[0, 1, 2]).is_ok());
        let err = Volume::labels([1, 1, 3], [1.0; 3], &[0, 1, 3]).unwrap_err();
        assert_eq!(err.category(), "validation");
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![0.5], VolumeKind::Labels).is_err());
    }

    #[test]
    fn spacing_and_length_are_validated() {
        assert!(Volume::image([2, 1, 1], [1.0, 0.0, 1.0], vec![0.0; 2]).is_err());
        assert!(Volume::image([2, 1, 1], [1.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn case_extents_must_match() {
        let img = Volume::image([1, 1, 2], [1.0; 3], vec![0.0; 2]).unwrap();
        let lab = Volume::labels([1, 2, 1], [1.0; 3], &[0, 0]).unwrap();
        assert!(CaseRecord::new(1, img, Some(lab)).is_err());
    }
}
