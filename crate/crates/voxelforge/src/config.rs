//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Lists
//! are comma separated. `preset` and `variant` are applied first and every
//! other key overrides the preset value. Keys:
//!
//! | key | value |
//! |-----|-------|
//! | `dataset`, `output`, `cache` | paths |
//! | `preset` | `desk` (default), `tiny` or `full` |
//! | `variant` | `plain`, `residual` or `preact` |
//! | `fold` | fold index or `all` |
//! | `folds`, `cv_seed` | cross-validation split |
//! | `seed` | training seed |
//! | `deterministic` | `true` forces single-threaded kernels |
//! | `checkpoint_every` | epochs between checkpoints |
//! | `checkpoints` | ensemble members for `predict` |
//! | `plan.target_spacing`, `plan.clip`, `plan.shift`, `plan.scale` | preprocessing |
//! | `train.patch_size`, `train.base_features`, `train.batch_size`, `train.iterations_per_epoch`, `train.epochs`, `train.initial_lr`, `train.momentum`, `train.nesterov`, `train.weight_decay`, `train.lr_exponent`, `train.foreground_fraction` | training |
//! | `aug.rotation_deg`, `aug.scale`, `aug.brightness`, `aug.contrast`, `aug.gamma`, `aug.noise_sigma` | `lo,hi,p` |
//! | `policy.excluded`, `policy.substituted` | case ids or `none` |
//! | `replacement.<id>` | replacement segmentation for a substituted case |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use voxelforge_core::augmentation::Ranged;
use voxelforge_core::evaluation::DatasetModificationPolicy;
use voxelforge_core::preprocessing::PreprocessPlan;
use voxelforge_core::training::TrainConfig;
use voxelforge_core::unet::NetworkVariant;
use voxelforge_core::Error as CoreError;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::sha256_hex;

fn invalid(msg: impl Into<String>) -> Error {
    CoreError::InvalidConfig(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    Index(usize),
    All,
}

impl FromStr for FoldSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(FoldSelection::All)
        } else {
            s.parse()
                .map(FoldSelection::Index)
                .map_err(|_| invalid(format!("fold must be an index or \"all\", got {s:?}")))
        }
    }
}

impl std::fmt::Display for FoldSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FoldSelection::Index(i) => write!(f, "{i}"),
            FoldSelection::All => f.write_str("all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub preset: String,
    pub plan: PreprocessPlan,
    pub train: TrainConfig,
    pub fold: FoldSelection,
    pub folds: usize,
    pub cv_seed: u64,
    pub checkpoint_every: usize,
    pub checkpoints: Vec<PathBuf>,
    pub deterministic: bool,
    pub policy: DatasetModificationPolicy,
    pub replacements: BTreeMap<u32, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset("desk", NetworkVariant::Plain).expect("desk preset exists")
    }
}

/// `key = value` pairs in file order, with 1-based line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(invalid(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn parse_scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_scalar(key, p.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| invalid(format!("{key}: expected {N} comma-separated values, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_ids(key: &str, v: &str) -> Result<std::collections::BTreeSet<u32>> {
    if v == "none" || v.is_empty() {
        Ok(Default::default())
    } else {
        Ok(parse_list::<u32>(key, v)?.into_iter().collect())
    }
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn ids(set: &std::collections::BTreeSet<u32>) -> String {
    if set.is_empty() {
        "none".into()
    } else {
        set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Applies one `train.*`, `aug.*`, `seed` or `variant` key.
/// Returns false when the key belongs elsewhere.
pub fn apply_train_key(train: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    let aug = &mut train.augment;
    let ranged = |v: &str| -> Result<Ranged> {
        let [lo, hi, p] = parse_array::<f64, 3>(key, v)?;
        Ok(Ranged::new(lo, hi, p))
    };
    match key {
        "variant" => train.variant = v.parse()?,
        "seed" => train.seed = parse_scalar(key, v)?,
        "train.patch_size" => train.patch_size = parse_array(key, v)?,
        "train.base_features" => train.base_features = parse_scalar(key, v)?,
        "train.batch_size" => train.batch_size = parse_scalar(key, v)?,
        "train.iterations_per_epoch" => train.iterations_per_epoch = parse_scalar(key, v)?,
        "train.epochs" => train.epochs = parse_scalar(key, v)?,
        "train.initial_lr" => train.initial_lr = parse_scalar(key, v)?,
        "train.momentum" => train.momentum = parse_scalar(key, v)?,
        "train.nesterov" => train.nesterov = parse_bool(key, v)?,
        "train.weight_decay" => train.weight_decay = parse_scalar(key, v)?,
        "train.lr_exponent" => train.lr_exponent = parse_scalar(key, v)?,
        "train.foreground_fraction" => train.foreground_fraction = parse_scalar(key, v)?,
        "aug.rotation_deg" => aug.rotation_deg = ranged(v)?,
        "aug.scale" => aug.scale = ranged(v)?,
        "aug.brightness" => aug.brightness = ranged(v)?,
        "aug.contrast" => aug.contrast = ranged(v)?,
        "aug.gamma" => aug.gamma = ranged(v)?,
        "aug.noise_sigma" => aug.noise_sigma = ranged(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn apply_plan_key(plan: &mut PreprocessPlan, key: &str, v: &str) -> Result<bool> {
    match key {
        "plan.target_spacing" => plan.target_spacing = parse_array(key, v)?,
        "plan.clip" => {
            let [lo, hi] = parse_array::<f64, 2>(key, v)?;
            plan.clip_range = (lo, hi);
        }
        "plan.shift" => plan.shift = parse_scalar(key, v)?,
        "plan.scale" => plan.scale = parse_scalar(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every training key with its value, in a fixed order.
pub fn train_pairs(t: &TrainConfig) -> Vec<(&'static str, String)> {
    let a = &t.augment;
    let r = |x: &Ranged| join(&[x.lo, x.hi, x.p]);
    vec![
        ("variant", t.variant.name().to_string()),
        ("seed", t.seed.to_string()),
        ("train.patch_size", join(&t.patch_size)),
        ("train.base_features", t.base_features.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.iterations_per_epoch", t.iterations_per_epoch.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.initial_lr", format!("{:?}", t.initial_lr)),
        ("train.momentum", format!("{:?}", t.momentum)),
        ("train.nesterov", t.nesterov.to_string()),
        ("train.weight_decay", format!("{:?}", t.weight_decay)),
        ("train.lr_exponent", format!("{:?}", t.lr_exponent)),
        ("train.foreground_fraction", format!("{:?}", t.foreground_fraction)),
        ("aug.rotation_deg", r(&a.rotation_deg)),
        ("aug.scale", r(&a.scale)),
        ("aug.brightness", r(&a.brightness)),
        ("aug.contrast", r(&a.contrast)),
        ("aug.gamma", r(&a.gamma)),
        ("aug.noise_sigma", r(&a.noise_sigma)),
    ]
}

pub fn plan_pairs(p: &PreprocessPlan) -> Vec<(&'static str, String)> {
    vec![
        ("plan.target_spacing", join(&p.target_spacing)),
        ("plan.clip", join(&[p.clip_range.0, p.clip_range.1])),
        ("plan.shift", format!("{:?}", p.shift)),
        ("plan.scale", format!("{:?}", p.scale)),
    ]
}

/// Rebuilds a training config from [`train_pairs`] output.
pub fn train_from_pairs(pairs: &[(String, String)]) -> Result<TrainConfig> {
    let variant = pairs
        .iter()
        .find(|(k, _)| k == "variant")
        .map(|(_, v)| v.parse())
        .transpose()?
        .unwrap_or(NetworkVariant::Plain);
    let mut t = TrainConfig::desk(variant);
    for (k, v) in pairs {
        if !apply_train_key(&mut t, k, v)? {
            return Err(invalid(format!("unexpected training key {k:?}")));
        }
    }
    Ok(t)
}

pub fn plan_from_pairs(pairs: &[(String, String)]) -> Result<PreprocessPlan> {
    let mut p = PreprocessPlan::default();
    for (k, v) in pairs {
        if !apply_plan_key(&mut p, k, v)? {
            return Err(invalid(format!("unexpected plan key {k:?}")));
        }
    }
    p.validate()?;
    Ok(p)
}

impl RunConfig {
    pub fn with_preset(preset: &str, variant: NetworkVariant) -> Result<Self> {
        let train = TrainConfig::preset(preset, variant)?;
        Ok(Self {
            dataset: None,
            output: None,
            cache: None,
            preset: preset.to_string(),
            plan: PreprocessPlan::default(),
            train,
            fold: FoldSelection::Index(0),
            folds: 5,
            cv_seed: 0,
            checkpoint_every: 10,
            checkpoints: Vec::new(),
            deterministic: false,
            policy: DatasetModificationPolicy::default(),
            replacements: BTreeMap::new(),
        })
    }

    /// Resolves file pairs and then overrides (later wins). Duplicate keys
    /// within the file are rejected.
    pub fn resolve(file: &[(String, String, usize)], overrides: &[(String, String)]) -> Result<Self> {
        let mut merged: BTreeMap<String, String> = BTreeMap::new();
        for (k, v, line) in file {
            if merged.insert(k.clone(), v.clone()).is_some() {
                return Err(invalid(format!("line {line}: duplicate key {k:?}")));
            }
        }
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        let preset = merged.get("preset").map(String::as_str).unwrap_or("desk");
        let variant = match merged.get("variant") {
            Some(v) => v.parse()?,
            None => NetworkVariant::Plain,
        };
        let mut cfg = Self::with_preset(preset, variant)?;
        for (k, v) in &merged {
            cfg.apply(k, v)?;
        }
        cfg.plan.validate()?;
        cfg.policy.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::resolve(&parse_pairs(text)?, overrides)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_text(&text, overrides)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        if apply_train_key(&mut self.train, key, v)? || apply_plan_key(&mut self.plan, key, v)? {
            return Ok(());
        }
        match key {
            "preset" => {}
            "dataset" => self.dataset = Some(v.into()),
            "output" => self.output = Some(v.into()),
            "cache" => self.cache = Some(v.into()),
            "fold" => self.fold = v.parse()?,
            "folds" => self.folds = parse_scalar(key, v)?,
            "cv_seed" => self.cv_seed = parse_scalar(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_scalar(key, v)?,
            "checkpoints" => {
                self.checkpoints = v
                    .split(',')
                    .map(|p| PathBuf::from(p.trim()))
                    .filter(|p| !p.as_os_str().is_empty())
                    .collect()
            }
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "policy.excluded" => self.policy.excluded_ids = parse_ids(key, v)?,
            "policy.substituted" => self.policy.substituted_ids = parse_ids(key, v)?,
            _ => match key.strip_prefix("replacement.") {
                Some(id) => {
                    let id: u32 = parse_scalar(key, id)?;
                    self.replacements.insert(id, v.into());
                }
                None => return Err(invalid(format!("unknown config key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Checks the fold index and training settings.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.plan.validate()?;
        if self.folds < 2 {
            return Err(invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let FoldSelection::Index(k) = self.fold {
            if k >= self.folds {
                return Err(invalid(format!("fold {k} does not exist with {} folds", self.folds)));
            }
        }
        if self.checkpoint_every < 1 {
            return Err(invalid("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    /// Every referenced input path must exist.
    pub fn validate_paths(&self) -> Result<()> {
        let mut inputs: Vec<&Path> = Vec::new();
        inputs.extend(self.dataset.as_deref());
        inputs.extend(self.cache.as_deref());
        inputs.extend(self.checkpoints.iter().map(PathBuf::as_path));
        inputs.extend(self.replacements.values().map(PathBuf::as_path));
        for p in inputs {
            if !p.exists() {
                return Err(Error::Usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Canonical text of the resolved configuration; parsing it yields the
    /// same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("preset", self.preset.clone());
        for (k, p) in [
            ("dataset", &self.dataset),
            ("output", &self.output),
            ("cache", &self.cache),
        ] {
            if let Some(v) = path(p) {
                line(k, v);
            }
        }
        line("fold", self.fold.to_string());
        line("folds", self.folds.to_string());
        line("cv_seed", self.cv_seed.to_string());
        line("deterministic", self.deterministic.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        if !self.checkpoints.is_empty() {
            let v: Vec<String> = self.checkpoints.iter().map(|p| p.display().to_string()).collect();
            line("checkpoints", v.join(","));
        }
        for (k, v) in plan_pairs(&self.plan).into_iter().chain(train_pairs(&self.train)) {
            line(k, v);
        }
        line("policy.excluded", ids(&self.policy.excluded_ids));
        line("policy.substituted", ids(&self.policy.substituted_ids));
        for (id, p) in &self.replacements {
            line(&format!("replacement.{id}"), p.display().to_string());
        }
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.render().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_preset() {
        let c = RunConfig::from_text("", &[]).unwrap();
        assert_eq!(c.train, TrainConfig::desk(NetworkVariant::Plain));
        assert_eq!(c.plan, PreprocessPlan::default());
        assert_eq!(c.fold, FoldSelection::Index(0));
    }

    #[test]
    fn keys_override_preset_and_flags_override_file() {
        let text = "preset = tiny\nvariant = residual # comment\ntrain.epochs = 7\nfold = 2\n";
        let c = RunConfig::from_text(text, &[("fold".into(), "all".into())]).unwrap();
        assert_eq!(c.train.variant, NetworkVariant::Residual);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.iterations_per_epoch, 50);
        assert_eq!(c.fold, FoldSelection::All);
    }

    #[test]
    fn render_round_trips() {
        let text = "variant = preact\ndataset = /data\nreplacement.15 = /x/seg15.nii\naug.gamma = 0.5,2,0.25\npolicy.excluded = none\nplan.target_spacing = 1,2,3\n";
        let c = RunConfig::from_text(text, &[]).unwrap();
        let again = RunConfig::from_text(&c.render(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert!(c.policy.excluded_ids.is_empty());
    }

    #[test]
    fn errors() {
        assert!(RunConfig::from_text("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2", &[]).is_err());
        assert!(RunConfig::from_text("variant = dense", &[]).is_err());
        assert!(RunConfig::from_text("no equals sign", &[]).is_err());
        assert!(RunConfig::from_text("plan.target_spacing = 1,0,1", &[]).is_err());
        let c = RunConfig::from_text("fold = 7", &[]).unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.category(), "invalid-config");
    }

    #[test]
    fn train_pairs_round_trip() {
        let t = TrainConfig::full(NetworkVariant::Residual);
        let pairs: Vec<(String, String)> = train_pairs(&t).into_iter().map(|(k, v)| (k.into(), v)).collect();
        assert_eq!(train_from_pairs(&pairs).unwrap(), t);
    }
}
