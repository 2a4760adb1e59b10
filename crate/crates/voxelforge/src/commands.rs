//! The pipeline steps behind each subcommand. Every artifact lands under the
//! command's output directory together with a `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use voxelforge_core::evaluation::{
    aggregate_report, apply_dataset_modifications, kits_case_metrics, make_cv_splits, MetricsReport,
};
use voxelforge_core::exec;
use voxelforge_core::inference::{ensemble_softmax, restore_original_geometry, sliding_window_predict};
use voxelforge_core::preprocessing::{fingerprint_from_geometries, preprocess_case, Fingerprint, PreprocessPlan};
use voxelforge_core::synthetic::{generate_case, SynthSpec};
use voxelforge_core::training::{CaseSampler, EpochRecord, TrainObserver, Trainer};
use voxelforge_core::volume::{CaseRecord, CaseStatus, Geometry, VolumeKind};

use crate::cache::{self, CachedCase};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{plan_pairs, FoldSelection, RunConfig};
use crate::dataset::{case_dir_name, list_cases, load_case, write_case, IMAGING_FILE, SEGMENTATION_FILE};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{create_dir, list_files, sha256_hex, write_atomic};
use crate::manifest::write_manifest;
use crate::nifti::{parse_nifti_header, read_volume, write_labels, HEADER_SIZE};
use crate::prefetch::{with_prefetch, PrefetchOptions};
use crate::report::report_json;
use crate::softmax::write_softmax;

pub const CONFIG_ECHO_FILE: &str = "config.resolved";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const PLAN_FILE: &str = "plan.txt";
pub const CACHE_DIR: &str = "cache";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.vxf";

/// Worker count from `VOXELFORGE_THREADS`, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var("VOXELFORGE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Sizes the global rayon pool from [`thread_budget`]. Later calls are no-ops.
pub fn configure_threads() -> usize {
    let n = thread_budget();
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    n
}

pub fn prediction_file_name(case_id: u32) -> String {
    format!("prediction_{case_id:05}.nii")
}

/// `prediction_00009.nii` -> 9.
pub fn parse_prediction_file_name(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("prediction_")?.strip_suffix(".nii")?;
    (digits.len() == 5 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub cases: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub extent: usize,
    pub spacing: [f64; 3],
}

impl Default for SynthArgs {
    fn default() -> Self {
        let spec = SynthSpec::default();
        Self {
            cases: 12,
            out: PathBuf::from("synthetic"),
            seed: spec.seed,
            extent: spec.extents[0],
            spacing: spec.spacing,
        }
    }
}

/// Writes `cases` phantoms with ids `0..cases` in the dataset layout.
pub fn synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    if args.cases == 0 {
        return Err(Error::Dataset("empty dataset: --cases must be at least 1".into()));
    }
    let spec = SynthSpec {
        extents: [args.extent; 3],
        spacing: args.spacing,
        seed: args.seed,
        ..SynthSpec::default()
    };
    create_dir(&args.out)?;
    let dirs = (0..args.cases as u32)
        .into_par_iter()
        .map(|id| write_case(&args.out, &generate_case(&spec, id)?))
        .collect::<Result<Vec<_>>>()?;
    let key = format!(
        "synth cases={} seed={} extent={} spacing={:?}",
        args.cases, args.seed, args.extent, args.spacing
    );
    write_manifest(&args.out, "synth", &sha256_hex(key.as_bytes()))?;
    info!("wrote {} synthetic cases to {}", dirs.len(), args.out.display());
    Ok(dirs)
}

// ---------------------------------------------------------------- plan-preprocess

#[derive(Clone, Debug, PartialEq)]
pub struct PlanSummary {
    pub plan: PreprocessPlan,
    pub fingerprint: Fingerprint,
    pub cases: usize,
    /// Cache entries written in this run; the rest were already current.
    pub written: usize,
    pub warnings: Vec<String>,
}

fn read_geometry(path: &Path) -> Result<Geometry> {
    use std::io::Read;
    let mut buf = vec![0u8; HEADER_SIZE];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .at(path)?;
    let h = parse_nifti_header(&buf)?;
    Ok(Geometry::new(h.dims, h.spacing.map(f64::from))?)
}

pub fn format_spacing(s: [f64; 3]) -> String {
    format!("({},{},{})", s[0], s[1], s[2])
}

/// Fingerprints the dataset and fills `out/cache` with preprocessed cases.
/// Entries whose plan hash and source digest already match are kept.
pub fn plan_preprocess(data: &Path, out: &Path, spacing: Option<[f64; 3]>) -> Result<PlanSummary> {
    let plan = match spacing {
        Some(s) => PreprocessPlan::with_spacing(s)?,
        None => PreprocessPlan::default(),
    };
    let (found, warnings) = list_cases(data)?;
    for w in &warnings {
        warn!("{w}");
    }
    if found.is_empty() {
        return Err(Error::Dataset(format!(
            "empty dataset: no cases under {}",
            data.display()
        )));
    }
    let geometries = found
        .iter()
        .map(|(_, dir)| read_geometry(&dir.join(IMAGING_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let fingerprint = fingerprint_from_geometries(&geometries, &plan)?;

    let cache_dir = out.join(CACHE_DIR);
    create_dir(&cache_dir)?;
    let hash = cache::plan_hash(&plan);
    let written: usize = found
        .par_iter()
        .map(|(id, dir)| -> Result<usize> {
            let digest = cache::source_digest(dir)?;
            if cache::lookup(&cache_dir, *id, &hash, &digest).is_some() {
                return Ok(0);
            }
            let case = preprocess_case(&load_case(*id, dir)?, &plan)?;
            cache::write_cached_case(
                &cache_dir,
                &CachedCase {
                    case,
                    plan_hash: hash.clone(),
                    source_digest: digest,
                },
            )?;
            Ok(1)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();

    let mut text = String::new();
    let _ = writeln!(text, "# target spacing {} mm", format_spacing(plan.target_spacing));
    for (k, v) in plan_pairs(&plan) {
        let _ = writeln!(text, "{k} = {v}");
    }
    let _ = writeln!(text, "plan_hash = {hash}");
    let _ = writeln!(text, "cases = {}", found.len());
    let fs = fingerprint.median_spacing;
    let _ = writeln!(text, "fingerprint.median_spacing = {:?},{:?},{:?}", fs[0], fs[1], fs[2]);
    let fr = fingerprint.median_resampled_shape;
    let _ = writeln!(
        text,
        "fingerprint.median_resampled_shape = {},{},{}",
        fr[0], fr[1], fr[2]
    );
    write_atomic(&out.join(PLAN_FILE), text.as_bytes())?;
    write_manifest(out, "plan-preprocess", &hash)?;
    info!(
        "{} cases, {} cache entries written, median resampled shape {:?}",
        found.len(),
        written,
        fr
    );
    Ok(PlanSummary {
        plan,
        fingerprint,
        cases: found.len(),
        written,
        warnings,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Required for full-scale settings.
    pub acknowledge_full_scale: bool,
    pub resume: Option<PathBuf>,
    /// Overrides the prefetch defaults derived from the thread budget.
    pub prefetch: Option<PrefetchOptions>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: Vec<EpochRecord>,
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct FoldFile<'a> {
    fold: String,
    folds: usize,
    cv_seed: u64,
    train_ids: &'a [u32],
    val_ids: &'a [u32],
    dropped: Vec<(u32, String)>,
}

/// Loads, modifies and preprocesses the cases of `cfg.dataset`.
/// Returns the usable preprocessed cases, dropped ids and warnings.
pub fn prepare_cases(cfg: &RunConfig) -> Result<(Vec<CaseRecord>, Vec<(u32, CaseStatus)>, Vec<String>)> {
    let data = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Usage("no dataset given (config key `dataset` or --data)".into()))?;
    let (found, mut warnings) = list_cases(data)?;
    if found.is_empty() {
        return Err(Error::Dataset(format!(
            "empty dataset: no cases under {}",
            data.display()
        )));
    }
    let hash = cache::plan_hash(&cfg.plan);
    let results = found
        .par_iter()
        .map(
            |(id, dir)| -> Result<(Option<CaseRecord>, Vec<(u32, CaseStatus)>, Vec<String>)> {
                let mut replacements = BTreeMap::new();
                if cfg.policy.substituted_ids.contains(id) {
                    if let Some(p) = cfg.replacements.get(id) {
                        replacements.insert(*id, read_volume(p, VolumeKind::Labels)?);
                    }
                }
                let modified = cfg.policy.excluded_ids.contains(id) || cfg.policy.substituted_ids.contains(id);
                let cached = match &cfg.cache {
                    Some(c) if !modified => cache::lookup(&c.join(CACHE_DIR), *id, &hash, &cache::source_digest(dir)?),
                    _ => None,
                };
                if let Some(c) = cached {
                    return Ok((Some(c.case), Vec::new(), Vec::new()));
                }
                let raw = load_case(*id, dir)?;
                let m = apply_dataset_modifications(vec![raw], &cfg.policy, &replacements)?;
                let case = m
                    .usable
                    .into_iter()
                    .next()
                    .map(|c| preprocess_case(&c, &cfg.plan))
                    .transpose()?;
                Ok((case, m.dropped, m.warnings))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let mut cases = Vec::new();
    let mut dropped = Vec::new();
    for (case, d, w) in results {
        cases.extend(case);
        dropped.extend(d);
        warnings.extend(w);
    }
    Ok((cases, dropped, warnings))
}

struct Recorder<'a> {
    out: &'a Path,
    every: usize,
    plan: PreprocessPlan,
}

impl Recorder<'_> {
    fn write_log(&self, log: &[EpochRecord]) -> Result<()> {
        write_atomic(&self.out.join(LOSS_LOG_FILE), format_loss_log(log).as_bytes())
    }
}

impl TrainObserver for Recorder<'_> {
    fn epoch_end(&mut self, trainer: &Trainer, r: &EpochRecord) -> voxelforge_core::Result<()> {
        info!("epoch {} lr {:.6} loss {:.5}", r.epoch, r.lr, r.mean_loss);
        let to_core = |e: Error| match e {
            Error::Core(c) => c,
            other => voxelforge_core::Error::WorkerFailure(format!("writing training artifacts: {other}")),
        };
        self.write_log(trainer.log()).map_err(to_core)?;
        let done = trainer.epoch();
        if done % self.every == 0 && done < trainer.config().epochs {
            let path = self.out.join(format!("checkpoint_epoch{done:04}.vxf"));
            save_checkpoint(&Checkpoint::from_trainer(trainer, &self.plan), &path).map_err(to_core)?;
        }
        Ok(())
    }
}

/// `epoch<TAB>lr<TAB>mean_loss` per line.
pub fn format_loss_log(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| format!("{}\t{}\t{}\n", r.epoch, r.lr, r.mean_loss))
        .collect()
}

/// Trains one fold (or all cases) and writes checkpoints, the loss log, the
/// split and the resolved configuration under `cfg.output`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let out = cfg
        .output
        .as_deref()
        .ok_or_else(|| Error::Usage("no output directory given (config key `output` or --out)".into()))?;
    if cfg.train.is_full_scale() && !opts.acknowledge_full_scale {
        return Err(Error::Usage(
            "full-scale training runs for days on a CPU; pass --i-know-this-takes-days to proceed".into(),
        ));
    }
    if cfg.deterministic {
        exec::set_single_threaded(true);
    }
    create_dir(out)?;
    write_atomic(&out.join(CONFIG_ECHO_FILE), cfg.render().as_bytes())?;

    let (cases, dropped, warnings) = prepare_cases(cfg)?;
    for w in &warnings {
        warn!("{w}");
    }
    let labelled: Vec<CaseRecord> = cases.into_iter().filter(|c| c.labels.is_some()).collect();
    let ids: Vec<u32> = labelled.iter().map(|c| c.case_id).collect();
    let (train_ids, val_ids) = match cfg.fold {
        FoldSelection::All => (ids.clone(), Vec::new()),
        FoldSelection::Index(k) => {
            let folds = make_cv_splits(&ids, cfg.folds, cfg.cv_seed)?;
            let f = folds.into_iter().nth(k).expect("validated fold index");
            (f.train_ids, f.val_ids)
        }
    };
    let fold_json = serde_json::to_string_pretty(&FoldFile {
        fold: cfg.fold.to_string(),
        folds: cfg.folds,
        cv_seed: cfg.cv_seed,
        train_ids: &train_ids,
        val_ids: &val_ids,
        dropped: dropped.iter().map(|(id, s)| (*id, format!("{s:?}"))).collect(),
    })
    .expect("fold file serializes");
    write_atomic(&out.join("split.json"), (fold_json + "\n").as_bytes())?;

    let train_cases: Vec<CaseRecord> = labelled
        .into_iter()
        .filter(|c| train_ids.contains(&c.case_id))
        .collect();
    let sampler = CaseSampler::new(&train_cases, &cfg.train)?;

    let mut trainer = match &opts.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.train != cfg.train || ck.plan != cfg.plan {
                return Err(Error::Incompatible(format!(
                    "{} was trained with a different configuration",
                    p.display()
                )));
            }
            ck.into_trainer()?
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    info!(
        "training {} on {} cases ({} parameters), epochs {}..{}",
        cfg.train.variant,
        train_cases.len(),
        trainer.network().parameter_count(),
        trainer.epoch(),
        cfg.train.epochs
    );
    let prefetch = opts.prefetch.unwrap_or_else(|| PrefetchOptions {
        workers: thread_budget().clamp(1, 4),
        ..PrefetchOptions::default()
    });
    let mut recorder = Recorder {
        out,
        every: cfg.checkpoint_every,
        plan: cfg.plan,
    };
    let start = trainer.iteration();
    let end = cfg.train.total_iterations();
    with_prefetch(&sampler, start, end, prefetch, |src| trainer.train(src, &mut recorder))?;
    recorder.write_log(trainer.log())?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&Checkpoint::from_trainer(&trainer, &cfg.plan), &final_checkpoint)?;
    write_manifest(out, "train", &cfg.hash())?;
    Ok(TrainOutcome {
        final_checkpoint,
        log: trainer.log().to_vec(),
        train_ids,
        val_ids,
        warnings,
    })
}

// ---------------------------------------------------------------- predict

#[derive(Clone, Debug, Default)]
pub struct PredictArgs {
    pub checkpoints: Vec<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Restrict to these case ids.
    pub case_ids: Option<Vec<u32>>,
    pub save_softmax: bool,
    pub deterministic: bool,
}

/// Sliding-window prediction of every case, averaged over the checkpoint
/// ensemble and restored to the original geometry.
pub fn predict(args: &PredictArgs) -> Result<Vec<PathBuf>> {
    if args.checkpoints.is_empty() {
        return Err(Error::Usage("no checkpoints given".into()));
    }
    if args.deterministic {
        exec::set_single_threaded(true);
    }
    let mut members = Vec::with_capacity(args.checkpoints.len());
    let mut digests = String::new();
    for p in &args.checkpoints {
        let bytes = std::fs::read(p).at(p)?;
        digests.push_str(&sha256_hex(&bytes));
        members.push(Checkpoint::from_bytes(&bytes)?);
    }
    for (p, m) in args.checkpoints.iter().zip(&members).skip(1) {
        members[0]
            .check_compatible(m)
            .map_err(|e| Error::Incompatible(format!("{}: {e}", p.display())))?;
    }
    let plan = members[0].plan;
    let nets = members.iter().map(Checkpoint::network).collect::<Result<Vec<_>>>()?;

    let (found, warnings) = list_cases(&args.data)?;
    for w in &warnings {
        warn!("{w}");
    }
    let found: Vec<_> = match &args.case_ids {
        Some(ids) => {
            for id in ids {
                if !found.iter().any(|(f, _)| f == id) {
                    return Err(Error::Dataset(format!(
                        "case {id} not found in {}",
                        args.data.display()
                    )));
                }
            }
            found.into_iter().filter(|(id, _)| ids.contains(id)).collect()
        }
        None => found,
    };
    if found.is_empty() {
        return Err(Error::Dataset(format!(
            "empty dataset: no cases under {}",
            args.data.display()
        )));
    }
    create_dir(&args.out)?;
    let mut written = Vec::with_capacity(found.len());
    for (id, dir) in &found {
        let image = read_volume(&dir.join(IMAGING_FILE), VolumeKind::Image)?;
        let pre = preprocess_case(&CaseRecord::new(*id, image, None)?, &plan)?;
        let soft = nets
            .iter()
            .map(|n| sliding_window_predict(n, &pre.image))
            .collect::<voxelforge_core::Result<Vec<_>>>()?;
        let mean = ensemble_softmax(&soft)?;
        if args.save_softmax {
            write_softmax(&args.out.join(format!("softmax_{id:05}.vxs")), &mean)?;
        }
        let labels = restore_original_geometry(&mean, pre.original)?;
        let path = args.out.join(prediction_file_name(*id));
        write_labels(&labels, &path)?;
        info!("{} -> {}", case_dir_name(*id), path.display());
        written.push(path);
    }
    write_manifest(&args.out, "predict", &sha256_hex(digests.as_bytes()))?;
    Ok(written)
}

// ---------------------------------------------------------------- evaluate

/// Where [`evaluate`] writes the table and its JSON twin.
pub fn report_paths(report: &Path) -> (PathBuf, PathBuf) {
    let json = report.with_extension("json");
    if json == report {
        (report.with_extension("txt"), json)
    } else {
        (report.to_path_buf(), json)
    }
}

/// Scores `pred/prediction_XXXXX.nii` against `gt/case_XXXXX/segmentation.nii`.
pub fn evaluate(pred: &Path, gt: &Path, report: &Path) -> Result<MetricsReport> {
    let preds: Vec<(u32, PathBuf)> = list_files(pred, |n| parse_prediction_file_name(n).is_some())?
        .into_iter()
        .map(|p| {
            let id = parse_prediction_file_name(&p.file_name().unwrap().to_string_lossy()).unwrap();
            (id, p)
        })
        .collect();
    if preds.is_empty() {
        return Err(Error::Dataset(format!(
            "no prediction_XXXXX.nii files in {}",
            pred.display()
        )));
    }
    let (found, _) = list_cases(gt)?;
    let with_labels: BTreeMap<u32, PathBuf> = found
        .into_iter()
        .filter(|(_, d)| d.join(SEGMENTATION_FILE).is_file())
        .map(|(id, d)| (id, d.join(SEGMENTATION_FILE)))
        .collect();
    let missing: Vec<u32> = preds
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| !with_labels.contains_key(id))
        .collect();
    if missing.len() == preds.len() {
        return Err(Error::Dataset(format!(
            "no case ids in common between {} and {}",
            pred.display(),
            gt.display()
        )));
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "case-id mismatch: predictions {missing:?} have no reference segmentation in {}",
            gt.display()
        )));
    }
    let per_case = preds
        .par_iter()
        .map(|(id, p)| -> Result<_> {
            let pv = read_volume(p, VolumeKind::Labels)?;
            let gv = read_volume(&with_labels[id], VolumeKind::Labels)?;
            Ok(kits_case_metrics(*id, &pv, &gv)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let r = aggregate_report(per_case)?;
    let (table, json) = report_paths(report);
    if let Some(parent) = table.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(&table, r.to_table().as_bytes())?;
    write_atomic(&json, report_json(&r).as_bytes())?;
    Ok(r)
}
