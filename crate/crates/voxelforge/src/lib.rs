//! File formats, dataset layout, checkpoints and the `voxelforge` command
//! line on top of [`voxelforge_core`].
//!
//! - [`nifti`]: uncompressed NIfTI-1 read/write.
//! - [`dataset`]: `case_XXXXX/{imaging,segmentation}.nii` directories.
//! - [`checkpoint`], [`cache`], [`softmax`]: binary artifacts.
//! - [`config`]: the flat key/value run configuration.
//! - [`prefetch`]: bounded background batch delivery for training.
//! - [`commands`]: one function per subcommand.

pub mod cache;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod nifti;
pub mod prefetch;
pub mod report;
pub mod softmax;

pub use error::{Error, Result};
pub use voxelforge_core as core;
