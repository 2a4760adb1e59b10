use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use tempfile::tempdir;
use voxelforge::commands::{
    evaluate, plan_preprocess, predict, synth, train, PredictArgs, SynthArgs, TrainOptions, LOSS_LOG_FILE,
};
use voxelforge::config::{FoldSelection, RunConfig};
use voxelforge::dataset::{case_dir_name, list_cases, load_dataset, SEGMENTATION_FILE};
use voxelforge::prefetch::{with_prefetch, PrefetchOptions};
use voxelforge_core::evaluation::DatasetModificationPolicy;
use voxelforge_core::preprocessing::{preprocess_case, PreprocessPlan};
use voxelforge_core::training::{CaseSampler, TrainConfig};
use voxelforge_core::unet::NetworkVariant;

fn small_dataset(root: &Path, cases: usize) -> PathBuf {
    let data = root.join("data");
    synth(&SynthArgs {
        cases,
        out: data.clone(),
        extent: 32,
        ..SynthArgs::default()
    })
    .unwrap();
    data
}

fn small_config(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_preset("tiny", NetworkVariant::Residual).unwrap();
    cfg.train.patch_size = [8, 16, 16];
    cfg.train.base_features = 4;
    cfg.train.iterations_per_epoch = 3;
    cfg.train.epochs = 2;
    cfg.dataset = Some(data.to_path_buf());
    cfg.output = Some(out.to_path_buf());
    cfg.fold = FoldSelection::All;
    cfg.checkpoint_every = 1;
    cfg.deterministic = true;
    cfg.policy = DatasetModificationPolicy::empty();
    cfg
}

fn opts(workers: usize) -> TrainOptions {
    TrainOptions {
        prefetch: Some(PrefetchOptions {
            workers,
            ..PrefetchOptions::default()
        }),
        ..TrainOptions::default()
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let tmp = tempdir().unwrap();
    let data = small_dataset(tmp.path(), 3);
    let a = train(&small_config(&data, &tmp.path().join("a")), &opts(1)).unwrap();
    let b = train(&small_config(&data, &tmp.path().join("b")), &opts(3)).unwrap();
    let bytes = |p: &Path| fs::read(p).unwrap();
    assert_eq!(bytes(&a.final_checkpoint), bytes(&b.final_checkpoint));
    assert_eq!(a.log.len(), 2);
    assert!(a.log.iter().all(|r| r.mean_loss.is_finite()));
    let log = fs::read_to_string(tmp.path().join("a").join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split('\t').count() == 3));

    let c_out = tmp.path().join("c");
    let resumed = train(
        &small_config(&data, &c_out),
        &TrainOptions {
            resume: Some(tmp.path().join("a/checkpoint_epoch0001.vxf")),
            ..opts(2)
        },
    )
    .unwrap();
    assert_eq!(bytes(&resumed.final_checkpoint), bytes(&a.final_checkpoint));

    // Incompatible resume.
    let mut other = small_config(&data, &tmp.path().join("d"));
    other.train.base_features = 2;
    let err = train(
        &other,
        &TrainOptions {
            resume: Some(a.final_checkpoint.clone()),
            ..opts(1)
        },
    )
    .unwrap_err();
    assert_eq!(err.category(), "incompatible");

    // Two-member ensemble prediction, then scoring.
    let pred = tmp.path().join("pred");
    let written = predict(&PredictArgs {
        checkpoints: vec![
            a.final_checkpoint.clone(),
            tmp.path().join("a/checkpoint_epoch0001.vxf"),
        ],
        data: data.clone(),
        out: pred.clone(),
        case_ids: Some(vec![1, 2]),
        save_softmax: true,
        deterministic: true,
    })
    .unwrap();
    assert_eq!(written.len(), 2);
    assert!(pred.join("prediction_00001.nii").is_file());
    assert!(fs::read_dir(&pred)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "vxs")));
    let report = evaluate(&pred, &data, &tmp.path().join("report.txt")).unwrap();
    assert_eq!(report.per_case.len(), 2);
    assert!(tmp.path().join("report.json").is_file());
}

#[test]
fn evaluating_the_reference_against_itself() {
    let tmp = tempdir().unwrap();
    let data = small_dataset(tmp.path(), 2);
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for id in [0u32, 1] {
        fs::copy(
            data.join(case_dir_name(id)).join(SEGMENTATION_FILE),
            pred.join(format!("prediction_{id:05}.nii")),
        )
        .unwrap();
    }
    let r = evaluate(&pred, &data, &tmp.path().join("r.txt")).unwrap();
    assert_eq!(r.mean_composite, 1.0);
    let table = fs::read_to_string(tmp.path().join("r.txt")).unwrap();
    assert!(
        table.lines().last().unwrap().ends_with("100.00 | 100.00 | 100.00"),
        "{table}"
    );

    fs::copy(pred.join("prediction_00001.nii"), pred.join("prediction_00007.nii")).unwrap();
    let err = evaluate(&pred, &data, &tmp.path().join("r.txt")).unwrap_err();
    assert!(err.to_string().contains("case-id mismatch"), "{err}");
}

#[test]
fn preprocessing_cache_is_idempotent() {
    let tmp = tempdir().unwrap();
    let data = small_dataset(tmp.path(), 3);
    let out = tmp.path().join("plan");
    let first = plan_preprocess(&data, &out, None).unwrap();
    assert_eq!((first.cases, first.written), (3, 3));
    let again = plan_preprocess(&data, &out, None).unwrap();
    assert_eq!(again.written, 0);
    assert_eq!(again.fingerprint, first.fingerprint);
    let plan = fs::read_to_string(out.join("plan.txt")).unwrap();
    assert!(plan.contains("(3.22,1.62,1.62)"), "{plan}");
}

#[test]
fn dataset_listing_reports_problems() {
    let tmp = tempdir().unwrap();
    let data = small_dataset(tmp.path(), 2);
    fs::create_dir(data.join("case_12")).unwrap();
    fs::create_dir(data.join("case_00005")).unwrap();
    let (cases, warnings) = list_cases(&data).unwrap();
    assert_eq!(cases.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(warnings.len(), 2, "{warnings:?}");
    let loaded = load_dataset(&data).unwrap();
    assert_eq!(loaded.cases.len(), 2);
    assert!(loaded.cases.iter().all(|c| c.labels.is_some()));
}

#[test]
fn prefetch_surfaces_a_stalled_worker() {
    let tmp = tempdir().unwrap();
    let data = small_dataset(tmp.path(), 1);
    let plan = PreprocessPlan::default();
    let cases: Vec<_> = load_dataset(&data)
        .unwrap()
        .cases
        .iter()
        .map(|c| preprocess_case(c, &plan).unwrap())
        .collect();
    let mut cfg = TrainConfig::tiny(NetworkVariant::Plain);
    cfg.patch_size = [8, 16, 16];
    let sampler = CaseSampler::new(&cases, &cfg).unwrap();

    let direct: Vec<_> = (0..6).map(|i| sampler.make_batch(i).unwrap()).collect();
    let fetched: Vec<_> = with_prefetch(
        &sampler,
        0,
        6,
        PrefetchOptions {
            workers: 3,
            ..Default::default()
        },
        |src| (0..6).map(|i| src.batch(i).unwrap()).collect(),
    );
    assert_eq!(direct, fetched);

    let stalled = PrefetchOptions {
        workers: 1,
        capacity: 1,
        timeout: Duration::ZERO,
    };
    let err = with_prefetch(&sampler, 0, 6, stalled, |src| src.batch(0).err());
    // A zero timeout can still win the race; either way nothing hangs.
    if let Some(e) = err {
        assert_eq!(e.category(), "worker");
    }
    let out_of_order = with_prefetch(&sampler, 0, 6, PrefetchOptions::default(), |src| {
        src.batch(3).unwrap_err()
    });
    assert_eq!(out_of_order.category(), "worker");
}
