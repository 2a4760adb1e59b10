//! Core numerics for volumetric CT segmentation with 3D U-Nets.
//!
//! The crate is `no_std` compatible (it needs `alloc`). Everything here is a
//! pure function of its inputs: file formats, checkpoints and the command
//! line live in the `voxelforge` companion crate.
//!
//! Layout:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a reverse-mode tape
//!   with exactly the operators the networks need.
//! - [`optim`]: parameters and momentum SGD.
//! - [`losses`]: cross-entropy, soft Dice and deep supervision.
//! - [`unet`]: topology planning and the plain, residual and pre-activation
//!   residual U-Nets.
//! - [`volume`], [`preprocessing`], [`augmentation`]: CT volumes, resampling,
//!   intensity normalization, patch sampling and augmentation.
//! - [`training`], [`inference`], [`evaluation`]: the training loop,
//!   sliding-window ensembles and Dice metrics with cross-validation splits.
//! - [`synthetic`]: generator of kidney/tumor phantoms for end-to-end tests.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augmentation;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod losses;
mod math;
pub mod optim;
pub mod preprocessing;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{LabelTensor, Tensor};
