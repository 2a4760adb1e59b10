use std::collections::BTreeSet;

use proptest::prelude::*;
use voxelforge_core::evaluation::{binary_dice, make_cv_splits, round_half_up_2};
use voxelforge_core::inference::{ensemble_softmax, tile_grid, SoftmaxVolume};
use voxelforge_core::preprocessing::{resample_grid, resampled_extent, Interpolation};
use voxelforge_core::unet::plan_topology;
use voxelforge_core::{Graph, Tensor};

fn grid() -> impl Strategy<Value = ([usize; 3], Vec<f64>)> {
    (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(d, h, w)| (Just([d, h, w]), prop::collection::vec(-1000.0f64..1000.0, d * h * w)))
}

proptest! {
    #[test]
    fn resampled_extent_formula(e in 1usize..600, s in 0.1f64..6.0, t in 0.1f64..6.0) {
        let want = ((e as f64 * s / t).round() as usize).max(1);
        prop_assert_eq!(resampled_extent(e, s, t), want);
        prop_assert_eq!(resampled_extent(e, t, t), e);
    }

    #[test]
    fn unit_step_resampling_is_identity((ext, data) in grid()) {
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            prop_assert_eq!(&resample_grid(&data, ext, ext, [1.0; 3], mode), &data);
        }
    }

    #[test]
    fn trilinear_stays_in_range((ext, data) in grid(), out in prop::array::uniform3(1usize..8), step in prop::array::uniform3(0.2f64..2.0)) {
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let res = resample_grid(&data, ext, out, step, Interpolation::Trilinear);
        prop_assert_eq!(res.len(), out.iter().product::<usize>());
        for v in res {
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn nearest_only_copies_values((ext, data) in grid(), out in prop::array::uniform3(1usize..8), step in prop::array::uniform3(0.2f64..2.0)) {
        let values: BTreeSet<u64> = data.iter().map(|v| v.to_bits()).collect();
        for v in resample_grid(&data, ext, out, step, Interpolation::Nearest) {
            prop_assert!(values.contains(&v.to_bits()));
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..300)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = binary_dice(&a, &b).unwrap();
        prop_assert_eq!(ab, binary_dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(binary_dice(&a, &a).unwrap(), 1.0);
        // Set oracle.
        let sa: BTreeSet<usize> = a.iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect();
        let sb: BTreeSet<usize> = b.iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect();
        let want = if sa.is_empty() && sb.is_empty() { 1.0 } else {
            2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
        };
        prop_assert_eq!(ab, want);
    }

    #[test]
    fn cv_splits_partition_the_ids(ids in prop::collection::btree_set(0u32..100_000, 1..120), folds in 1usize..8, seed in any::<u64>()) {
        let ids: Vec<u32> = ids.into_iter().collect();
        prop_assume!(folds <= ids.len());
        let splits = make_cv_splits(&ids, folds, seed).unwrap();
        prop_assert_eq!(splits.len(), folds);
        prop_assert_eq!(&splits, &make_cv_splits(&ids, folds, seed).unwrap());
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = splits.iter().map(|f| f.val_ids.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &splits {
            let val: BTreeSet<u32> = f.val_ids.iter().copied().collect();
            let train: BTreeSet<u32> = f.train_ids.iter().copied().collect();
            prop_assert!(val.is_disjoint(&train));
            prop_assert_eq!(val.len() + train.len(), ids.len());
            for v in val {
                prop_assert!(seen.insert(v));
            }
        }
        prop_assert_eq!(seen.len(), ids.len());
    }

    #[test]
    fn half_up_rounding(cents in 0u32..10_000) {
        let base = cents as f64 / 100.0;
        prop_assert_eq!(round_half_up_2(base + 0.005), (cents + 1) as f64 / 100.0);
        prop_assert_eq!(round_half_up_2(base + 0.004), base);
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 3 * 8)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, 2, 2, 2], logits).unwrap());
        let p = g.softmax_channels(x).unwrap();
        let v = g.value(p);
        for i in 0..8 {
            let s: f64 = (0..3).map(|c| v.data()[c * 8 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_members_reproduce_exactly(data in prop::collection::vec(0.0f64..1.0, 12), k in 1usize..8) {
        let m = SoftmaxVolume { extents: [2, 2, 1], spacing: [1.0; 3], channels: 3, data };
        prop_assert_eq!(ensemble_softmax(&vec![m.clone(); k]).unwrap(), m);
    }

    #[test]
    fn tiles_cover_the_volume(ext in prop::array::uniform3(1usize..40), patch in prop::array::uniform3(1usize..20)) {
        let tiles = tile_grid(ext, patch);
        let mut covered = vec![false; ext.iter().product()];
        for t in &tiles {
            for z in t[0]..(t[0] + patch[0]).min(ext[0]) {
                for y in t[1]..(t[1] + patch[1]).min(ext[1]) {
                    for x in t[2]..(t[2] + patch[2]).min(ext[2]) {
                        covered[(z * ext[1] + y) * ext[2] + x] = true;
                    }
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn topology_features_double_then_cap(exp in prop::array::uniform3(2u32..8), base in 1usize..64) {
        let patch = exp.map(|e| 1usize << e);
        let topo = plan_topology(patch, base, 3).unwrap();
        for (i, s) in topo.stages.iter().enumerate() {
            prop_assert_eq!(s.features, (base << i).min(320));
        }
        prop_assert!(topo.bottleneck_grid().iter().all(|&g| g >= 4 && g < 8));
    }
}
