//! Binary checkpoints.
//!
//! ```text
//! b"VXFCKPT\0" | version: u32 LE | header length: u64 LE | header (JSON)
//! | per parameter: values then momentum, f64 LE | SHA-256 of all prior bytes
//! ```
//!
//! The header carries the variant, topology, training configuration,
//! preprocessing plan, epoch, iteration and loss log. Sampling and
//! augmentation randomness is a pure function of the seed and iteration
//! counter, so those two fields are the complete RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxelforge_core::optim::Parameter;
use voxelforge_core::preprocessing::PreprocessPlan;
use voxelforge_core::tensor::Tensor;
use voxelforge_core::training::{EpochRecord, TrainConfig, Trainer};
use voxelforge_core::unet::{build_network, Network, NetworkTopology, NetworkVariant, Stage};

use crate::config::{plan_from_pairs, plan_pairs, train_from_pairs, train_pairs};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"VXFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub plan: PreprocessPlan,
    pub topology: NetworkTopology,
    pub epoch: usize,
    pub iteration: u64,
    pub log: Vec<EpochRecord>,
    pub parameters: Vec<Parameter>,
}

#[derive(Serialize, Deserialize)]
struct StageRepr {
    stride: [usize; 3],
    features: usize,
    encoder_blocks: usize,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    patch_size: [usize; 3],
    in_channels: usize,
    num_classes: usize,
    base_features: usize,
    max_features: usize,
    stages: Vec<StageRepr>,
}

#[derive(Serialize, Deserialize)]
struct EpochRepr {
    epoch: usize,
    lr: f64,
    mean_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamRepr {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: String,
    topology: TopologyRepr,
    train: Vec<(String, String)>,
    plan: Vec<(String, String)>,
    epoch: usize,
    iteration: u64,
    log: Vec<EpochRepr>,
    parameters: Vec<ParamRepr>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, plan: &PreprocessPlan) -> Self {
        Self {
            train: trainer.config().clone(),
            plan: *plan,
            topology: trainer.network().topology().clone(),
            epoch: trainer.epoch(),
            iteration: trainer.iteration(),
            log: trainer.log().to_vec(),
            parameters: trainer.network().parameters().to_vec(),
        }
    }

    pub fn variant(&self) -> NetworkVariant {
        self.train.variant
    }

    pub fn network(&self) -> Result<Network> {
        let mut net = build_network(self.train.variant, &self.topology, self.train.seed)?;
        net.load_parameters(self.parameters.clone())?;
        Ok(net)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let net = self.network()?;
        Ok(Trainer::resume(self.train, net, self.epoch, self.iteration, self.log)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.topology;
        let header = Header {
            variant: self.train.variant.name().to_string(),
            topology: TopologyRepr {
                patch_size: t.patch_size,
                in_channels: t.in_channels,
                num_classes: t.num_classes,
                base_features: t.base_features,
                max_features: t.max_features,
                stages: t
                    .stages
                    .iter()
                    .map(|s| StageRepr {
                        stride: s.stride,
                        features: s.features,
                        encoder_blocks: s.encoder_blocks,
                    })
                    .collect(),
            },
            train: train_pairs(&self.train)
                .into_iter()
                .map(|(k, v)| (k.into(), v))
                .collect(),
            plan: plan_pairs(&self.plan).into_iter().map(|(k, v)| (k.into(), v)).collect(),
            epoch: self.epoch,
            iteration: self.iteration,
            log: self
                .log
                .iter()
                .map(|r| EpochRepr {
                    epoch: r.epoch,
                    lr: r.lr,
                    mean_loss: r.mean_loss,
                })
                .collect(),
            parameters: self
                .parameters
                .iter()
                .map(|p| ParamRepr {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let values: usize = self.parameters.iter().map(|p| 2 * p.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.parameters {
            if p.momentum.len() != p.len() {
                return Err(
                    voxelforge_core::Error::Contract(format!("momentum of {} has the wrong length", p.name)).into(),
                );
            }
            for v in p.value.data().iter().chain(&p.momentum) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(format_err("bad magic"));
        }
        if bytes.len() < 20 + 32 {
            return Err(format_err("truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads version {VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("checksum mismatch (corrupt or truncated file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format_err(e.to_string()))?;

        let train = train_from_pairs(&header.train)?;
        if train.variant.name() != header.variant {
            return Err(format_err("variant field disagrees with training configuration"));
        }
        let plan = plan_from_pairs(&header.plan)?;
        let t = header.topology;
        let topology = NetworkTopology {
            patch_size: t.patch_size,
            in_channels: t.in_channels,
            num_classes: t.num_classes,
            base_features: t.base_features,
            max_features: t.max_features,
            stages: t
                .stages
                .into_iter()
                .map(|s| Stage {
                    stride: s.stride,
                    features: s.features,
                    encoder_blocks: s.encoder_blocks,
                })
                .collect(),
        };
        topology.validate()?;

        let mut payload = &body[20 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if payload.len() < 8 * n {
                return Err(format_err("truncated parameter data"));
            }
            let (head, rest) = payload.split_at(8 * n);
            payload = rest;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut parameters = Vec::with_capacity(header.parameters.len());
        for p in header.parameters {
            let n: usize = p.shape.iter().product();
            let value = Tensor::new(&p.shape, take(n)?)?;
            let momentum = take(n)?;
            parameters.push(Parameter {
                name: p.name,
                value,
                grad: None,
                momentum,
            });
        }
        if !payload.is_empty() {
            return Err(format_err("trailing bytes after parameter data"));
        }
        let log = header
            .log
            .into_iter()
            .map(|r| EpochRecord {
                epoch: r.epoch,
                lr: r.lr,
                mean_loss: r.mean_loss,
            })
            .collect();
        Ok(Self {
            train,
            plan,
            topology,
            epoch: header.epoch,
            iteration: header.iteration,
            log,
            parameters,
        })
    }

    /// Ensemble members must share variant-independent geometry: patch,
    /// classes and preprocessing.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.topology.patch_size != other.topology.patch_size
            || self.topology.num_classes != other.topology.num_classes
            || self.topology.in_channels != other.topology.in_channels
        {
            return Err(Error::Incompatible(format!(
                "checkpoint topologies differ: patch {:?}/{:?}, classes {}/{}",
                self.topology.patch_size,
                other.topology.patch_size,
                self.topology.num_classes,
                other.topology.num_classes
            )));
        }
        if self.plan != other.plan {
            return Err(Error::Incompatible(
                "checkpoints were trained with different preprocessing plans".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).at(path)?;
    Checkpoint::from_bytes(&bytes)
}
