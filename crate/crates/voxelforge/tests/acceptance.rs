//! One PASS/FAIL line per acceptance criterion. Positional arguments filter
//! criteria by substring; with none, all of them run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use voxelforge::checkpoint::{save_checkpoint, Checkpoint};
use voxelforge::commands::{evaluate, predict, synth, train, PredictArgs, SynthArgs, TrainOptions};
use voxelforge::config::{FoldSelection, RunConfig};
use voxelforge::dataset::case_dir_name;
use voxelforge::nifti::{
    decode_volume, encode_volume, parse_nifti_header, read_volume, write_volume, ByteOrder, Datatype,
};
use voxelforge::softmax::read_softmax;
use voxelforge_core::evaluation::{
    apply_dataset_modifications, composite, format_2dp, format_percent, kits_case_metrics, make_cv_splits,
    DatasetModificationPolicy,
};
use voxelforge_core::gradcheck::run_suite;
use voxelforge_core::preprocessing::{normalize_ct, preprocess_case, PreprocessPlan};
use voxelforge_core::synthetic::{generate_case, SynthSpec};
use voxelforge_core::training::{CaseSampler, TrainConfig, Trainer};
use voxelforge_core::unet::{plan_topology, NetworkVariant};
use voxelforge_core::volume::{CaseRecord, Volume, VolumeKind};
use voxelforge_core::{Graph, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    for seed in 0..5 {
        for (name, err) in run_suite(seed, 1e-5).map_err(fail)? {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst.1 < 1e-4 && secs < 120.0,
        format!("max relative error {:.2e} ({}), {secs:.1}s", worst.1, worst.0),
    )
}

fn adjoint() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0xAD);
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let mut shapes = ChaCha8Rng::seed_from_u64(0xAE);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let stride: [usize; 3] = std::array::from_fn(|_| shapes.random_range(1..=2));
        let out: [usize; 3] = std::array::from_fn(|_| shapes.random_range(1..=5));
        let (ci, co) = (shapes.random_range(1..=4), shapes.random_range(1..=4));
        let x = normal(&[1, ci, out[0] * stride[0], out[1] * stride[1], out[2] * stride[2]]);
        let w = normal(&[co, ci, stride[0], stride[1], stride[2]]);
        let y = normal(&[1, co, out[0], out[1], out[2]]);
        let mut g = Graph::new();
        let (xi, wi, yi) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let fwd = g.conv3d(xi, wi, None, stride, [0; 3]).map_err(fail)?;
        let back = g.conv3d_transpose(yi, wi, stride).map_err(fail)?;
        let lhs = g.value(fwd).dot(&y).map_err(fail)?;
        let rhs = g.value(back).dot(&x).map_err(fail)?;
        worst = worst.max((lhs - rhs).abs());
    }
    check(
        worst <= 1e-10,
        format!("max |<Ax,y> - <x,A'y>| = {worst:.2e} over 20 geometries"),
    )
}

fn topology() -> Outcome {
    let t = plan_topology([80, 160, 160], 30, 3).map_err(fail)?;
    let features: Vec<usize> = t.stages.iter().map(|s| s.features).collect();
    let last = t.stages.last().unwrap().stride;
    check(
        t.num_stages() == 6
            && t.bottleneck_grid() == [5, 5, 5]
            && features == [30, 60, 120, 240, 320, 320]
            && last == [1, 2, 2],
        format!(
            "{} stages, bottleneck {:?}, features {features:?}, final stride {last:?}",
            t.num_stages(),
            t.bottleneck_grid()
        ),
    )
}

fn metric_arithmetic() -> Outcome {
    let rows = [
        (97.34, 85.04, "91.19"),
        (97.37, 85.13, "91.25"),
        (97.37, 85.09, "91.23"),
    ];
    let mut got = Vec::new();
    let mut ok = true;
    for (k, t, want) in rows {
        let from_fractions = format_percent(composite(k / 100.0, t / 100.0));
        let from_percents = format_2dp(composite(k, t));
        ok &= from_fractions == want && from_percents == want;
        got.push(from_fractions);
    }
    check(ok, format!("composites {got:?}"))
}

fn dice_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0xD1CE);
    for case in 0..100u32 {
        let mut draw = || -> Vec<u8> { (0..512).map(|_| r.random_range(0..3u8)).collect() };
        let (p, g) = (draw(), draw());
        let vol = |l: &[u8]| Volume::labels([8, 8, 8], [1.0; 3], l).unwrap();
        let m = kits_case_metrics(case, &vol(&p), &vol(&g)).map_err(fail)?;
        let brute = |fg: fn(u8) -> bool| {
            let (mut i, mut a, mut b) = (0u32, 0u32, 0u32);
            for (&x, &y) in p.iter().zip(&g) {
                a += fg(x) as u32;
                b += fg(y) as u32;
                i += (fg(x) && fg(y)) as u32;
            }
            if a + b == 0 {
                1.0
            } else {
                2.0 * f64::from(i) / f64::from(a + b)
            }
        };
        let (k, t) = (brute(|v| v >= 1), brute(|v| v == 2));
        if m.kidney_dice != k || m.tumor_dice != t || m.composite != (k + t) / 2.0 {
            return Err(format!("case {case}: {m:?} vs brute force ({k}, {t})"));
        }
    }
    Ok("100 random 8^3 volumes match exactly".into())
}

fn normalization() -> Outcome {
    let vol = Volume::image([1, 1, 3], [1.0; 3], vec![-100.0, 101.0, 400.0]).map_err(fail)?;
    let out = normalize_ct(&vol, &PreprocessPlan::default()).map_err(fail)?;
    let want = [-2.3407, 0.0, 2.6398];
    let err = out
        .data()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(err <= 1e-4, format!("{:?}, max deviation {err:.1e}", out.data()))
}

/// Synthesizes 12 cases, holds out 9..=11, trains on the rest with the desk
/// preset, predicts the held-out cases and scores them.
fn desk_run(root: &Path, data: &Path, heldout: &Path, variant: NetworkVariant) -> Result<f64, String> {
    let mut cfg = RunConfig::with_preset("desk", variant).map_err(fail)?;
    cfg.dataset = Some(data.to_path_buf());
    let out = root.join(variant.name());
    cfg.output = Some(out.clone());
    cfg.fold = FoldSelection::All;
    cfg.checkpoint_every = cfg.train.epochs;
    let outcome = train(&cfg, &TrainOptions::default()).map_err(fail)?;
    let pred = out.join("pred");
    predict(&PredictArgs {
        checkpoints: vec![outcome.final_checkpoint],
        data: heldout.to_path_buf(),
        out: pred.clone(),
        ..PredictArgs::default()
    })
    .map_err(fail)?;
    let report = evaluate(&pred, heldout, &out.join("report.txt")).map_err(fail)?;
    Ok(report.mean_composite)
}

fn end_to_end() -> Outcome {
    let tmp = tempdir().map_err(fail)?;
    let data = tmp.path().join("data");
    let heldout = tmp.path().join("heldout");
    synth(&SynthArgs {
        cases: 12,
        out: data.clone(),
        seed: 7,
        extent: 64,
        spacing: [1.0; 3],
    })
    .map_err(fail)?;
    fs::create_dir_all(&heldout).map_err(fail)?;
    for id in 9..12 {
        fs::rename(data.join(case_dir_name(id)), heldout.join(case_dir_name(id))).map_err(fail)?;
    }
    let t = Instant::now();
    let mut scores = Vec::new();
    for v in NetworkVariant::ALL {
        let s = desk_run(tmp.path(), &data, &heldout, v)?;
        println!(
            "    {:<9} composite {:.4} ({:.0}s)",
            v.name(),
            s,
            t.elapsed().as_secs_f64()
        );
        scores.push((v, s));
    }
    let plain = scores[0].1;
    let ok = plain >= 0.80 && scores.iter().all(|(_, s)| (s - plain).abs() <= 0.10);
    let detail = scores
        .iter()
        .map(|(v, s)| format!("{} {s:.4}", v.name()))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("{detail}; {:.0}s", t.elapsed().as_secs_f64()))
}

fn memorization() -> Outcome {
    let spec = SynthSpec::default();
    let case = preprocess_case(&generate_case(&spec, 0).map_err(fail)?, &PreprocessPlan::default()).map_err(fail)?;
    let cases = [case];
    let mut report = Vec::new();
    let mut ok = true;
    for v in NetworkVariant::ALL {
        let cfg = TrainConfig::tiny(v);
        let mut trainer = Trainer::new(cfg.clone()).map_err(fail)?;
        let mut sampler = CaseSampler::new(&cases, &cfg).map_err(fail)?;
        for _ in 0..cfg.epochs {
            trainer.train_epoch(&mut sampler).map_err(fail)?;
        }
        let n: usize = cfg.patch_size.iter().product();
        let [d, h, w] = cfg.patch_size;
        let (mut pred, mut gt) = (Vec::new(), Vec::new());
        for it in 0..8u64 {
            let b = sampler.make_batch(1_000_000 + it).map_err(fail)?;
            for k in 0..b.case_ids.len() {
                let img = Tensor::new(&[1, 1, d, h, w], b.image.data()[k * n..(k + 1) * n].to_vec()).map_err(fail)?;
                let logits = trainer.network().predict_logits(&img).map_err(fail)?;
                pred.extend((0..n).map(|i| {
                    (0..3).fold(0, |best, c| {
                        if logits.data()[c * n + i] > logits.data()[best * n + i] {
                            c
                        } else {
                            best
                        }
                    }) as u8
                }));
                gt.extend_from_slice(&b.labels.data()[k * n..(k + 1) * n]);
            }
        }
        let vol = |l: &[u8]| Volume::labels([pred.len() / (h * w), h, w], [1.0; 3], l).unwrap();
        let m = kits_case_metrics(0, &vol(&pred), &vol(&gt)).map_err(fail)?;
        ok &= m.composite >= 0.95;
        report.push(format!("{} {:.4}", v.name(), m.composite));
    }
    check(
        ok,
        format!(
            "patch composite after {} iterations: {}",
            TrainConfig::tiny(NetworkVariant::Plain).total_iterations(),
            report.join(", ")
        ),
    )
}

fn ensembling() -> Outcome {
    let tmp = tempdir().map_err(fail)?;
    let data = tmp.path().join("data");
    synth(&SynthArgs {
        cases: 1,
        out: data.clone(),
        ..SynthArgs::default()
    })
    .map_err(fail)?;
    let plan = PreprocessPlan::default();
    let mut paths = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = TrainConfig::desk(NetworkVariant::Plain);
        cfg.seed = seed;
        let p = tmp.path().join(format!("m{seed}.vxf"));
        save_checkpoint(&Checkpoint::from_trainer(&Trainer::new(cfg).map_err(fail)?, &plan), &p).map_err(fail)?;
        paths.push(p);
    }
    let run = |name: &str, checkpoints: Vec<PathBuf>| -> Result<_, String> {
        let out = tmp.path().join(name);
        predict(&PredictArgs {
            checkpoints,
            data: data.clone(),
            out: out.clone(),
            save_softmax: true,
            ..PredictArgs::default()
        })
        .map_err(fail)?;
        let soft = read_softmax(&out.join("softmax_00000.vxs")).map_err(fail)?;
        let labels = fs::read(out.join("prediction_00000.nii")).map_err(fail)?;
        Ok((soft, labels))
    };
    let single = run("single", vec![paths[0].clone()])?;
    let same = run("same", vec![paths[0].clone(); 5])?;
    let mixed = run("mixed", paths.clone())?;
    let bitwise = single
        .0
        .data
        .iter()
        .zip(&same.0.data)
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && single.1 == same.1;
    let sum_err = mixed.0.max_sum_error();
    let differs = mixed.0.data != single.0.data;
    check(
        bitwise && differs && sum_err <= 1e-6,
        format!("identical members bitwise equal: {bitwise}; perturbed mean max |sum - 1| = {sum_err:.1e}"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempdir().map_err(fail)?;
    let data = tmp.path().join("data");
    synth(&SynthArgs {
        cases: 2,
        out: data.clone(),
        ..SynthArgs::default()
    })
    .map_err(fail)?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let mut cfg = RunConfig::with_preset("desk", NetworkVariant::Plain).map_err(fail)?;
        cfg.dataset = Some(data.clone());
        cfg.output = Some(tmp.path().join(name));
        cfg.fold = FoldSelection::All;
        cfg.deterministic = true;
        cfg.train.iterations_per_epoch = 10;
        cfg.train.epochs = 1;
        let o = train(&cfg, &TrainOptions::default()).map_err(fail)?;
        fs::read(o.final_checkpoint).map_err(fail)
    };
    let (a, b) = (run("a")?, run("b")?);
    check(
        a == b,
        format!(
            "{} checkpoint bytes after 10 iterations, identical: {}",
            a.len(),
            a == b
        ),
    )
}

fn nifti() -> Outcome {
    let tmp = tempdir().map_err(fail)?;
    let mut r = ChaCha8Rng::seed_from_u64(0x11F);
    let ext = [3, 4, 5];
    for dt in Datatype::ALL {
        let data: Vec<f64> = (0..60)
            .map(|_| match dt {
                Datatype::U8 => f64::from(r.random::<u8>()),
                Datatype::I16 => f64::from(r.random::<i16>()),
                Datatype::I32 => f64::from(r.random::<i32>()),
                Datatype::F32 => f64::from(r.random_range(-1e4f32..1e4)),
                Datatype::F64 => r.random_range(-1e9..1e9),
            })
            .collect();
        let vol = Volume::image(ext, [0.75, 1.25, 2.5], data).map_err(fail)?;
        let path = tmp.path().join(format!("v{}.nii", dt.code()));
        write_volume(&vol, &path, dt).map_err(fail)?;
        if read_volume(&path, VolumeKind::Image).map_err(fail)? != vol {
            return Err(format!("datatype {dt:?} did not round-trip"));
        }
    }
    // Byte-swap every header field and value of an int16 file.
    let vol = Volume::image(ext, [1.0, 2.0, 3.0], (0..60).map(|i| f64::from(i * 37 - 900)).collect()).map_err(fail)?;
    let le = encode_volume(&vol, Datatype::I16).map_err(fail)?;
    let mut be = le.clone();
    let mut swap = |at: usize, width: usize| be[at..at + width].reverse();
    swap(0, 4);
    (0..8).for_each(|i| swap(40 + 2 * i, 2));
    swap(70, 2);
    swap(72, 2);
    (0..8).for_each(|i| swap(76 + 4 * i, 4));
    (108..120).step_by(4).for_each(|at| swap(at, 4));
    (0..60).for_each(|i| swap(352 + 2 * i, 2));
    let h = parse_nifti_header(&be).map_err(fail)?;
    let back = decode_volume(&be, None, VolumeKind::Image).map_err(fail)?;
    check(
        h.byte_order == ByteOrder::Big && back == vol,
        format!(
            "{} datatypes round-trip; swapped header read as {:?}",
            Datatype::ALL.len(),
            h.byte_order
        ),
    )
}

fn policy() -> Outcome {
    let cases = || -> Vec<CaseRecord> {
        (0..210)
            .map(|id| {
                let img = Volume::image([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
                let lab = Volume::labels([1, 1, 1], [1.0; 3], &[0]).unwrap();
                CaseRecord::new(id, img, Some(lab)).unwrap()
            })
            .collect()
    };
    let p = DatasetModificationPolicy::default();
    let replacement = Volume::labels([1, 1, 1], [1.0; 3], &[1]).map_err(fail)?;
    let with: BTreeMap<u32, Volume> = p.substituted_ids.iter().map(|&id| (id, replacement.clone())).collect();
    let full = apply_dataset_modifications(cases(), &p, &with).map_err(fail)?;
    let bare = apply_dataset_modifications(cases(), &p, &BTreeMap::new()).map_err(fail)?;
    let ids: Vec<u32> = full.usable.iter().map(|c| c.case_id).collect();
    let mut sizes: Vec<usize> = make_cv_splits(&ids, 5, 0)
        .map_err(fail)?
        .iter()
        .map(|f| f.val_ids.len())
        .collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    check(
        full.usable.len() == 206 && bare.usable.len() == 204 && sizes == [42, 41, 41, 41, 41],
        format!(
            "{} usable with replacements, {} without; fold sizes {sizes:?}",
            full.usable.len(),
            bare.usable.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient-suite", gradients),
        ("adjoint-identity", adjoint),
        ("topology", topology),
        ("metric-arithmetic", metric_arithmetic),
        ("dice-oracle", dice_oracle),
        ("normalization", normalization),
        ("end-to-end-desk", end_to_end),
        ("memorization", memorization),
        ("ensembling", ensembling),
        ("determinism", determinism),
        ("nifti-round-trip", nifti),
        ("dataset-policy", policy),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
