//! Command-line runner and file formats for multi-modal contrastive
//! pre-training experiments, on top of the `cmssl-core` engine.
//!
//! * [`config`]: the JSON experiment config and its fingerprint;
//! * [`rawfmt`]: dataset manifests and CMRW raw tensors;
//! * [`checkpoint`]: parameter checkpoints, sidecars and train state;
//! * [`logs`]: training and grid CSVs;
//! * [`commands`]: the `generate | pretrain | finetune | grid | gradcheck | report` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod logs;
pub mod rawfmt;

pub use error::{CliError, Result};
