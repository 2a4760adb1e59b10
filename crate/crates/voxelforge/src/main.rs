use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxelforge::commands::{self, PredictArgs, SynthArgs, TrainOptions};
use voxelforge::config::RunConfig;
use voxelforge::{Error, Result};

/// 3D U-Net kidney and tumor segmentation pipeline.
#[derive(Parser)]
#[command(name = "voxelforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic kidney/tumor cases in the dataset layout.
    Synth {
        #[arg(long)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Voxels per axis (at least 32).
        #[arg(long, default_value_t = 64)]
        extent: usize,
    },
    /// Fingerprint a dataset and build the preprocessed cache.
    PlanPreprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target spacing in mm, (depth, height, width).
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"], allow_negative_numbers = true)]
        spacing: Option<Vec<f64>>,
    },
    /// Train one cross-validation fold.
    Train {
        /// Key/value run configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Fold index or "all".
        #[arg(long)]
        fold: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output directory of plan-preprocess to reuse.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Any config key, e.g. --set train.batch_size=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long = "i-know-this-takes-days")]
        i_know_this_takes_days: bool,
    },
    /// Predict label volumes with a checkpoint ensemble.
    Predict {
        /// Comma-separated checkpoint files.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only these case ids.
        #[arg(long, value_delimiter = ',')]
        cases: Option<Vec<u32>>,
        /// Also write the ensemble softmax per case.
        #[arg(long)]
        save_softmax: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Score predictions against reference segmentations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Table output; the JSON form goes next to it with a .json extension.
        #[arg(long)]
        report: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    commands::configure_threads();
    match cli.command {
        Command::Synth {
            cases,
            out,
            seed,
            extent,
        } => {
            let dirs = commands::synth(&SynthArgs {
                cases,
                out,
                seed,
                extent,
                ..SynthArgs::default()
            })?;
            println!("wrote {} cases", dirs.len());
        }
        Command::PlanPreprocess { data, out, spacing } => {
            let spacing = spacing.map(|s| [s[0], s[1], s[2]]);
            let s = commands::plan_preprocess(&data, &out, spacing)?;
            println!(
                "{} cases, target spacing {}, median resampled shape {:?}, {} cache entries written",
                s.cases,
                commands::format_spacing(s.plan.target_spacing),
                s.fingerprint.median_resampled_shape,
                s.written
            );
        }
        Command::Train {
            config,
            variant,
            fold,
            preset,
            data,
            out,
            cache,
            seed,
            epochs,
            deterministic,
            resume,
            set,
            i_know_this_takes_days,
        } => {
            let mut overrides: Vec<(String, String)> = Vec::new();
            let path = |p: PathBuf| p.display().to_string();
            overrides.extend(preset.map(|v| ("preset".into(), v)));
            overrides.extend(variant.map(|v| ("variant".into(), v)));
            overrides.extend(fold.map(|v| ("fold".into(), v)));
            overrides.extend(data.map(|v| ("dataset".into(), path(v))));
            overrides.extend(out.map(|v| ("output".into(), path(v))));
            overrides.extend(cache.map(|v| ("cache".into(), path(v))));
            overrides.extend(seed.map(|v| ("seed".into(), v.to_string())));
            overrides.extend(epochs.map(|v| ("train.epochs".into(), v.to_string())));
            if deterministic {
                overrides.push(("deterministic".into(), "true".into()));
            }
            for kv in set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                overrides.push((k.trim().into(), v.trim().into()));
            }
            let cfg = match config {
                Some(p) => RunConfig::from_file(&p, &overrides)?,
                None => RunConfig::from_text("", &overrides)?,
            };
            let outcome = commands::train(
                &cfg,
                &TrainOptions {
                    acknowledge_full_scale: i_know_this_takes_days,
                    resume,
                    prefetch: None,
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!("final epoch {} mean loss {}", last.epoch, last.mean_loss);
            }
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Predict {
            checkpoints,
            data,
            out,
            cases,
            save_softmax,
            deterministic,
        } => {
            let written = commands::predict(&PredictArgs {
                checkpoints,
                data,
                out,
                case_ids: cases,
                save_softmax,
                deterministic,
            })?;
            println!("wrote {} predictions", written.len());
        }
        Command::Evaluate { pred, gt, report } => {
            let r = commands::evaluate(&pred, &gt, &report)?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
