//! Fully sharded data-parallel training of a swapped-prediction network at
//! desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`netspec`] generates RegNet-style stage widths and the dense toy topology.
//! * [`engine`] runs forward/backward passes with optional activation recompute.
//! * [`swav`] computes Sinkhorn codes and the swapped-prediction loss.
//! * [`fabric`] provides deterministic in-process collectives.
//! * [`fsdp`] shards parameters and optimizer state and runs training steps.
//! * [`ckptplan`] plans activation-checkpoint boundaries.
//! * [`optim`] holds SGD, layer-wise trust-ratio scaling and the LR schedule.
//! * [`ckptstore`] persists sharded and sliced checkpoints.
//! * [`probe`] measures feature quality with a linear classifier.
//! * [`cli`] wires everything into the `shardtrain` executable.

pub mod ckptplan;
pub mod ckptstore;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod fabric;
pub mod fsdp;
pub mod netspec;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod swav;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
