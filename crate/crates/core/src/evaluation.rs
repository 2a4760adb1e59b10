//! Kidney/tumor Dice metrics, cross-validation splits, dataset
//! modification rules and report aggregation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{contract, ensure, Result};
use crate::math;
use crate::rng;
use crate::volume::{CaseRecord, CaseStatus, Volume, VolumeKind};

/// `2|A ∩ B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn binary_dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    ensure!(
        pred.len() == gt.len(),
        "dice of masks with {} and {} voxels",
        pred.len(),
        gt.len()
    );
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += usize::from(p);
        b += usize::from(g);
        inter += usize::from(p && g);
    }
    Ok(dice_from_counts(inter, a, b))
}

fn dice_from_counts(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Arithmetic mean of kidney and tumor Dice.
pub fn composite(kidney: f64, tumor: f64) -> f64 {
    (kidney + tumor) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: u32,
    pub kidney_dice: f64,
    pub tumor_dice: f64,
    pub composite: f64,
}

/// Kidney Dice on `label >= 1`, tumor Dice on `label == 2`.
pub fn kits_metrics_from_labels(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    ensure!(
        pred.len() == gt.len(),
        "label volumes of {} and {} voxels",
        pred.len(),
        gt.len()
    );
    ensure!(pred.iter().chain(gt).all(|&l| l <= 2), "labels outside {{0, 1, 2}}");
    let mut k = (0usize, 0usize, 0usize);
    let mut t = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (pk, gk) = (p >= 1, g >= 1);
        let (pt, gt) = (p == 2, g == 2);
        k.0 += usize::from(pk && gk);
        k.1 += usize::from(pk);
        k.2 += usize::from(gk);
        t.0 += usize::from(pt && gt);
        t.1 += usize::from(pt);
        t.2 += usize::from(gt);
    }
    let kidney = dice_from_counts(k.0, k.1, k.2);
    let tumor = dice_from_counts(t.0, t.1, t.2);
    Ok((kidney, tumor, composite(kidney, tumor)))
}

pub fn kits_case_metrics(case_id: u32, pred: &Volume, gt: &Volume) -> Result<CaseMetrics> {
    ensure!(
        pred.kind() == VolumeKind::Labels && gt.kind() == VolumeKind::Labels,
        "metrics need label volumes"
    );
    ensure!(
        pred.extents() == gt.extents(),
        "case {}: prediction extents {:?} differ from reference {:?}",
        case_id,
        pred.extents(),
        gt.extents()
    );
    let (kidney_dice, tumor_dice, composite) = kits_metrics_from_labels(&pred.label_bytes()?, &gt.label_bytes()?)?;
    Ok(CaseMetrics {
        case_id,
        kidney_dice,
        tumor_dice,
        composite,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
}

/// Seeded shuffle, then id `j` of the shuffled order validates in fold
/// `j mod folds`. Both lists of every fold are returned sorted.
pub fn make_cv_splits(case_ids: &[u32], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    ensure!(folds >= 1, "at least one fold is required");
    let unique: BTreeSet<u32> = case_ids.iter().copied().collect();
    ensure!(unique.len() == case_ids.len(), "duplicate case ids");
    ensure!(folds <= case_ids.len(), "{} folds for {} cases", folds, case_ids.len());
    let mut order: Vec<u32> = unique.iter().copied().collect();
    order.shuffle(&mut rng::stream(seed, &[0xF01D]));
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let val: BTreeSet<u32> = order.iter().skip(f).step_by(folds).copied().collect();
        out.push(Fold {
            train_ids: unique.difference(&val).copied().collect(),
            val_ids: val.into_iter().collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetModificationPolicy {
    pub excluded_ids: BTreeSet<u32>,
    /// Cases whose reference labels must be replaced.
    pub substituted_ids: BTreeSet<u32>,
}

impl Default for DatasetModificationPolicy {
    /// Excludes 23, 68, 125 and 133; replaces the labels of 15 and 37.
    fn default() -> Self {
        Self {
            excluded_ids: [23, 68, 125, 133].into_iter().collect(),
            substituted_ids: [15, 37].into_iter().collect(),
        }
    }
}

impl DatasetModificationPolicy {
    pub fn empty() -> Self {
        Self {
            excluded_ids: BTreeSet::new(),
            substituted_ids: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let both: Vec<_> = self.excluded_ids.intersection(&self.substituted_ids).collect();
        ensure!(both.is_empty(), "ids {:?} are both excluded and substituted", both);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModifiedDataset {
    /// Included and substituted cases, in input order.
    pub usable: Vec<CaseRecord>,
    /// Ids dropped, with the status that caused it.
    pub dropped: Vec<(u32, CaseStatus)>,
    pub warnings: Vec<String>,
}

/// Drops excluded cases and swaps in replacement labels for substituted
/// ones. A substituted case without a replacement stays pending and is
/// dropped with a warning.
pub fn apply_dataset_modifications(
    cases: Vec<CaseRecord>,
    policy: &DatasetModificationPolicy,
    replacements: &BTreeMap<u32, Volume>,
) -> Result<ModifiedDataset> {
    policy.validate()?;
    let mut usable = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for mut case in cases {
        let id = case.case_id;
        if policy.excluded_ids.contains(&id) {
            case.status = CaseStatus::Excluded;
            dropped.push((id, case.status));
        } else if policy.substituted_ids.contains(&id) {
            match replacements.get(&id) {
                Some(labels) => {
                    ensure!(
                        labels.kind() == VolumeKind::Labels,
                        "replacement for case {} is not a label volume",
                        id
                    );
                    ensure!(
                        labels.extents() == case.image.extents(),
                        "replacement labels for case {} have extents {:?}, image has {:?}",
                        id,
                        labels.extents(),
                        case.image.extents()
                    );
                    case.labels = Some(labels.clone());
                    case.status = CaseStatus::Substituted;
                    usable.push(case);
                }
                None => {
                    warnings.push(format!(
                        "case {id} needs replacement labels but none were supplied; dropped"
                    ));
                    dropped.push((id, CaseStatus::SubstitutedPending));
                }
            }
        } else {
            usable.push(case);
        }
    }
    Ok(ModifiedDataset {
        usable,
        dropped,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetrics>,
    pub mean_kidney: f64,
    pub mean_tumor: f64,
    pub mean_composite: f64,
}

/// Unweighted case means of every column.
pub fn aggregate_report(per_case: Vec<CaseMetrics>) -> Result<MetricsReport> {
    ensure!(!per_case.is_empty(), "report over zero cases");
    let n = per_case.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| per_case.iter().map(f).sum::<f64>() / n;
    let (mean_kidney, mean_tumor, mean_composite) =
        (mean(|c| c.kidney_dice), mean(|c| c.tumor_dice), mean(|c| c.composite));
    Ok(MetricsReport {
        per_case,
        mean_kidney,
        mean_tumor,
        mean_composite,
    })
}

/// Rounds to two decimals, half up. A 1e-7 allowance absorbs binary
/// representation error, so 91.545 rounds to 91.55.
pub fn round_half_up_2(x: f64) -> f64 {
    math::floor(x * 100.0 + 0.5 + 1e-7) / 100.0
}

/// Two-decimal rendering under [`round_half_up_2`].
pub fn format_2dp(x: f64) -> String {
    format!("{:.2}", round_half_up_2(x))
}

/// Dice fraction as a two-decimal percentage.
pub fn format_percent(dice: f64) -> String {
    format_2dp(dice * 100.0)
}

pub const REPORT_HEADER: [&str; 4] = ["Case", "Kidney Dice", "Tumor Dice", "Composite Dice"];

impl MetricsReport {
    /// `|`-delimited table in percent: one row per case plus a `mean` row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", REPORT_HEADER.join(" | "));
        for c in &self.per_case {
            let _ = writeln!(
                s,
                "case_{:05} | {} | {} | {}",
                c.case_id,
                format_percent(c.kidney_dice),
                format_percent(c.tumor_dice),
                format_percent(c.composite)
            );
        }
        let _ = writeln!(
            s,
            "mean | {} | {} | {}",
            format_percent(self.mean_kidney),
            format_percent(self.mean_tumor),
            format_percent(self.mean_composite)
        );
        s
    }

    pub fn metrics_for(&self, case_id: u32) -> Result<&CaseMetrics> {
        self.per_case
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| contract!("no metrics for case {}", case_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn dice_examples() {
        assert_eq!(binary_dice(&[true, true], &[true, true]).unwrap(), 1.0);
        assert_eq!(binary_dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(binary_dice(&[true, true, false], &[false, true, true]).unwrap(), 0.5);
        assert_eq!(binary_dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(binary_dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn composite_rounding() {
        assert_eq!(format_2dp(composite(97.34, 85.04)), "91.19");
        assert_eq!(format_2dp(composite(97.37, 85.13)), "91.25");
        assert_eq!(format_2dp(composite(97.37, 85.09)), "91.23");
        assert_eq!(format_2dp(91.545), "91.55");
        assert_eq!(format_2dp(91.0), "91.00");
    }

    #[test]
    fn perfect_prediction() {
        let l = vec![0, 1, 2, 2, 1];
        assert_eq!(kits_metrics_from_labels(&l, &l).unwrap(), (1.0, 1.0, 1.0));
        assert!(kits_metrics_from_labels(&[3], &[0]).is_err());
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<u32> = (0..206).collect();
        let folds = make_cv_splits(&ids, 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.val_ids.len()).collect();
        assert_eq!(sizes, vec![42, 41, 41, 41, 41]);
        let one = make_cv_splits(&ids, 1, 1).unwrap();
        assert!(one[0].train_ids.is_empty() && one[0].val_ids.len() == 206);
        assert!(make_cv_splits(&ids[..3], 5, 1).is_err());
    }

    #[test]
    fn report_means() {
        let m = |id, c| CaseMetrics {
            case_id: id,
            kidney_dice: c,
            tumor_dice: c,
            composite: c,
        };
        let r = aggregate_report(vec![m(1, 0.90), m(2, 0.92)]).unwrap();
        assert_eq!(format_percent(r.mean_composite), "91.00");
        assert!(aggregate_report(vec![]).is_err());
        assert!(r
            .to_table()
            .starts_with("Case | Kidney Dice | Tumor Dice | Composite Dice\n"));
    }
}
