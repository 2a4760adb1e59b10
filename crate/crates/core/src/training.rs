//! SGD training over sampled, augmented patch batches with deep
//! supervision.
//!
//! Batches are a pure function of `(seed, iteration)`: sample `k` of
//! iteration `i` draws its case, window and augmentation from its own
//! stream. Resuming from a checkpoint at iteration `i` therefore replays
//! exactly the batches an uninterrupted run would have seen.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::augmentation::{augment, sample_patch, AugmentParams};
use crate::error::{contract, ensure, Error, Result};
use crate::losses::deep_supervision_loss;
use crate::math;
use crate::optim::{sgd_step, Sgd};
use crate::rng;
use crate::tensor::{LabelTensor, Tensor};
use crate::unet::{build_network, plan_topology, Network, NetworkTopology, NetworkVariant};
use crate::volume::{CaseRecord, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: NetworkVariant,
    pub patch_size: [usize; 3],
    pub base_features: usize,
    pub num_classes: usize,
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_exponent: f64,
    /// Probability that a sampled patch is centred on foreground.
    pub foreground_fraction: f64,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale settings: 1000 epochs of 250 batches of two 80x160x160
    /// patches.
    pub fn full(variant: NetworkVariant) -> Self {
        Self {
            variant,
            patch_size: [80, 160, 160],
            base_features: variant.default_base_features(),
            num_classes: NUM_CLASSES,
            batch_size: 2,
            iterations_per_epoch: 250,
            epochs: 1000,
            initial_lr: 0.01,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            lr_exponent: 0.9,
            foreground_fraction: 1.0 / 3.0,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }

    /// 30 epochs of 50 batches on 16x32x32 patches with 8 base features.
    pub fn desk(variant: NetworkVariant) -> Self {
        Self {
            patch_size: [16, 32, 32],
            base_features: 8,
            iterations_per_epoch: 50,
            epochs: 30,
            ..Self::full(variant)
        }
    }

    /// 200 iterations without augmentation, for memorization checks. The
    /// desk step size needs about 400 iterations before the tumor class
    /// appears, so this preset steps harder with lighter momentum.
    pub fn tiny(variant: NetworkVariant) -> Self {
        Self {
            iterations_per_epoch: 50,
            epochs: 4,
            initial_lr: 0.1,
            momentum: 0.9,
            augment: AugmentParams::disabled(),
            ..Self::desk(variant)
        }
    }

    pub fn preset(name: &str, variant: NetworkVariant) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(variant)),
            "desk" => Ok(Self::desk(variant)),
            "tiny" => Ok(Self::tiny(variant)),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {:?} (expected full, desk or tiny)",
                other
            ))),
        }
    }

    pub fn total_iterations(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    /// True when the run is at least as large as the full-scale schedule on
    /// either axis (patch volume or iteration count).
    pub fn is_full_scale(&self) -> bool {
        let full = Self::full(self.variant);
        let vol = |p: [usize; 3]| p.iter().product::<usize>();
        vol(self.patch_size) >= vol(full.patch_size) || self.total_iterations() >= full.total_iterations()
    }

    pub fn sgd(&self, lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs < 1 || self.iterations_per_epoch < 1 {
            return bad("epochs and iterations_per_epoch must be at least 1");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_exponent >= 0.0) {
            return bad("weight_decay and lr_exponent must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return bad("foreground_fraction must lie in [0, 1]");
        }
        self.augment
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        self.topology().map(|_| ())
    }

    /// Topology for the configured patch; an unsatisfiable patch is an
    /// invalid configuration.
    pub fn topology(&self) -> Result<NetworkTopology> {
        plan_topology(self.patch_size, self.base_features, self.num_classes).map_err(|e| match e {
            Error::InvalidPatch(m) | Error::Contract(m) => Error::InvalidConfig(m),
            other => other,
        })
    }
}

/// `initial_lr * (1 - epoch / epochs)^exponent`.
pub fn poly_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let frac = 1.0 - epoch.min(config.epochs) as f64 / config.epochs as f64;
    config.initial_lr * math::powf(frac, config.lr_exponent)
}

/// Inputs `[B, 1, D, H, W]` and labels `[B, D, H, W]` plus the source cases.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: Tensor,
    pub labels: LabelTensor,
    pub case_ids: Vec<u32>,
}

/// Supplies the batch for a given global iteration.
pub trait BatchSource {
    fn batch(&mut self, iteration: u64) -> Result<Batch>;
}

/// Deterministic sampler over a fixed set of preprocessed cases.
#[derive(Clone, Debug)]
pub struct CaseSampler<'a> {
    cases: &'a [CaseRecord],
    patch_size: [usize; 3],
    batch_size: usize,
    foreground_fraction: f64,
    augment: AugmentParams,
    seed: u64,
}

impl<'a> CaseSampler<'a> {
    pub fn new(cases: &'a [CaseRecord], config: &TrainConfig) -> Result<Self> {
        ensure!(!cases.is_empty(), "no training cases");
        for c in cases {
            ensure!(c.labels.is_some(), "training case {} has no labels", c.case_id);
        }
        Ok(Self {
            cases,
            patch_size: config.patch_size,
            batch_size: config.batch_size,
            foreground_fraction: config.foreground_fraction,
            augment: config.augment,
            seed: config.seed,
        })
    }

    /// Batch for `iteration`; independent of any previous call.
    pub fn make_batch(&self, iteration: u64) -> Result<Batch> {
        let n: usize = self.patch_size.iter().product();
        let mut image = Vec::with_capacity(self.batch_size * n);
        let mut labels = Vec::with_capacity(self.batch_size * n);
        let mut case_ids = Vec::with_capacity(self.batch_size);
        for k in 0..self.batch_size {
            let mut r = rng::stream(self.seed, &[0xBA7C, iteration, k as u64]);
            let case = &self.cases[r.random_range(0..self.cases.len())];
            let force = r.random::<f64>() < self.foreground_fraction;
            let patch = sample_patch(case, self.patch_size, force, &mut r)?;
            let patch = augment(patch, &self.augment, &mut r);
            image.extend_from_slice(&patch.image);
            labels.extend_from_slice(&patch.labels);
            case_ids.push(case.case_id);
        }
        let [d, h, w] = self.patch_size;
        Ok(Batch {
            image: Tensor::new(&[self.batch_size, 1, d, h, w], image)?,
            labels: LabelTensor::new([self.batch_size, d, h, w], labels)?,
            case_ids,
        })
    }
}

impl BatchSource for CaseSampler<'_> {
    fn batch(&mut self, iteration: u64) -> Result<Batch> {
        self.make_batch(iteration)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Called after every epoch, e.g. to write checkpoints.
pub trait TrainObserver {
    fn epoch_end(&mut self, trainer: &Trainer, record: &EpochRecord) -> Result<()>;
}

impl TrainObserver for () {
    fn epoch_end(&mut self, _: &Trainer, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    net: Network,
    config: TrainConfig,
    /// Completed epochs.
    epoch: usize,
    /// Completed optimizer steps.
    iteration: u64,
    log: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh network initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let topology = config.topology()?;
        let net = build_network(config.variant, &topology, config.seed)?;
        Ok(Self {
            net,
            config,
            epoch: 0,
            iteration: 0,
            log: Vec::new(),
        })
    }

    /// Continues a run from saved state.
    pub fn resume(
        config: TrainConfig,
        net: Network,
        epoch: usize,
        iteration: u64,
        log: Vec<EpochRecord>,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(
            net.variant() == config.variant && *net.topology() == config.topology()?,
            "checkpoint network does not match the configuration"
        );
        ensure!(
            log.len() == epoch,
            "loss log has {} entries for {} epochs",
            log.len(),
            epoch
        );
        Ok(Self {
            net,
            config,
            epoch,
            iteration,
            log,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let mut pass = self.net.forward(&batch.image, true)?;
        let heads = pass.heads.clone();
        let loss_id = deep_supervision_loss(&mut pass.graph, &heads, &batch.labels)?;
        let loss = pass.graph.value(loss_id).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                lr,
                cases: batch.case_ids.clone(),
            });
        }
        pass.graph.backward(loss_id)?;
        self.net.collect_gradients(&mut pass)?;
        sgd_step(self.net.parameters_mut(), self.config.sgd(lr))?;
        self.iteration += 1;
        Ok(loss)
    }

    /// Runs the remaining iterations of the current epoch.
    pub fn train_epoch(&mut self, source: &mut dyn BatchSource) -> Result<EpochRecord> {
        ensure!(self.epoch < self.config.epochs, "training already finished");
        let lr = poly_lr(self.epoch, &self.config);
        let first = (self.epoch * self.config.iterations_per_epoch) as u64;
        let end = first + self.config.iterations_per_epoch as u64;
        ensure!(
            (first..end).contains(&self.iteration),
            "iteration {} is outside epoch {}",
            self.iteration,
            self.epoch
        );
        let mut total = 0.0;
        while self.iteration < end {
            let batch = source.batch(self.iteration)?;
            total += self.step(&batch, lr)?;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            mean_loss: total / self.config.iterations_per_epoch as f64,
        };
        self.epoch += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn train(&mut self, source: &mut dyn BatchSource, observer: &mut dyn TrainObserver) -> Result<()> {
        while self.epoch < self.config.epochs {
            if self.iteration != (self.epoch * self.config.iterations_per_epoch) as u64 {
                return Err(contract!("cannot resume in the middle of epoch {}", self.epoch));
            }
            let record = self.train_epoch(source)?;
            observer.epoch_end(self, &record)?;
        }
        Ok(())
    }
}
