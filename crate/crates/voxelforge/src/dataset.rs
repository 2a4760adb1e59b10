//! The KiTS directory layout: `root/case_XXXXX/imaging.nii` plus an optional
//! `segmentation.nii` per case.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use voxelforge_core::volume::{CaseRecord, VolumeKind};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::create_dir;
use crate::nifti::{read_volume, write_labels, write_volume, Datatype};

pub const IMAGING_FILE: &str = "imaging.nii";
pub const SEGMENTATION_FILE: &str = "segmentation.nii";

pub fn case_dir_name(case_id: u32) -> String {
    format!("case_{case_id:05}")
}

/// `case_00023` -> 23. Exactly five digits after the prefix.
pub fn parse_case_dir_name(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("case_")?;
    if digits.len() == 5 && digits.bytes().all(|b| b.is_ascii_digit()) {
        digits.parse().ok()
    } else {
        None
    }
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    /// Sorted by case id.
    pub cases: Vec<CaseRecord>,
    pub warnings: Vec<String>,
}

/// Case directories under `root`, sorted by id, plus warnings for skipped
/// entries.
pub fn list_cases(root: &Path) -> Result<(Vec<(u32, PathBuf)>, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut found = Vec::new();
    let mut warnings = Vec::new();
    for entry in fs::read_dir(root).at(root)? {
        let entry = entry.at(root)?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match parse_case_dir_name(&name) {
            Some(id) => {
                if path.join(IMAGING_FILE).is_file() {
                    found.push((id, path));
                } else if path.join(format!("{IMAGING_FILE}.gz")).is_file() {
                    warnings.push(format!(
                        "{name}: only {IMAGING_FILE}.gz present; decompress it first, skipped"
                    ));
                } else {
                    warnings.push(format!("{name}: no {IMAGING_FILE}, skipped"));
                }
            }
            None => warnings.push(format!("{name}: not a case_XXXXX directory, skipped")),
        }
    }
    found.sort();
    warnings.sort();
    Ok((found, warnings))
}

pub fn load_case(case_id: u32, dir: &Path) -> Result<CaseRecord> {
    let image = read_volume(&dir.join(IMAGING_FILE), VolumeKind::Image)?;
    let seg = dir.join(SEGMENTATION_FILE);
    let labels = if seg.is_file() {
        Some(read_volume(&seg, VolumeKind::Labels)?)
    } else {
        None
    };
    Ok(CaseRecord::new(case_id, image, labels)?)
}

/// Loads every well-formed case directory. A case without a segmentation
/// file gets `labels = None`.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let (found, warnings) = list_cases(root)?;
    let cases = found
        .par_iter()
        .map(|(id, dir)| load_case(*id, dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { cases, warnings })
}

/// Writes one case in the standard layout. Images are stored as float32.
pub fn write_case(root: &Path, case: &CaseRecord) -> Result<PathBuf> {
    let dir = root.join(case_dir_name(case.case_id));
    create_dir(&dir)?;
    write_volume(&case.image, &dir.join(IMAGING_FILE), Datatype::F32)?;
    if let Some(labels) = &case.labels {
        write_labels(labels, &dir.join(SEGMENTATION_FILE))?;
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_names() {
        assert_eq!(parse_case_dir_name("case_00023"), Some(23));
        assert_eq!(parse_case_dir_name("case_00000"), Some(0));
        assert_eq!(parse_case_dir_name("case_0023"), None);
        assert_eq!(parse_case_dir_name("case_000230"), None);
        assert_eq!(parse_case_dir_name("case_0002a"), None);
        assert_eq!(parse_case_dir_name("Case_00023"), None);
        assert_eq!(case_dir_name(209), "case_00209");
    }
}
