//! Experiment runner for differentially private federated architecture
//! search: configuration, checkpoints and the `dpfnas` subcommands.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
