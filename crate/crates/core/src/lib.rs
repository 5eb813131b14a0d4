//! Multi-modal contrastive self-supervised pre-training.
//!
//! Everything in this crate is pure computation and builds without `std`
//! (an allocator is required). File formats, the command line and wall-clock
//! telemetry live in the `cmssl` crate.
//!
//! Dataflow:
//!
//! * pre-training: [`views`] builds augmented (or raw) views per modality,
//!   [`encoders`] maps each view to an embedding, [`contrastive`] scores the
//!   batch with multi-positive InfoNCE and [`trainer`] steps the optimizer;
//! * downstream: [`downstream`] concatenates per-modality representations,
//!   trains a linear head (optionally the backbones too) and reports accuracy;
//! * [`grid`] runs pretrain-set × finetune-set tables over several seeds.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod contrastive;
pub mod dataset;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::{ParamSet, Tensor};
