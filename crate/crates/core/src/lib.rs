//! Differentially private federated architecture search.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide named
//! parameter collections and a reverse-mode tape, [`nas`] builds the mixed-
//! operation supernet, [`bilevel`] holds the weight and architecture updates,
//! [`dp`] and [`privacy`] implement the Gaussian mechanism and its accountant,
//! and [`federation`] runs the whole search across simulated parties.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bilevel;
pub mod data;
pub mod dp;
pub mod error;
pub mod federation;
pub mod nas;
pub mod privacy;
pub mod reference;
pub mod tensor;
pub mod wire;

pub use autodiff::{Batch, Evaluation, Model, ParamGroup, ParamSelector, Tape};
pub use bilevel::{FdEpsilon, HyperParameters};
pub use data::{generate_dataset, Dataset, DatasetSplits, Generator, SyntheticDatasetSpec};
pub use dp::{ClipConfig, NoiseConfig, Phase, SubsampleConfig};
pub use error::{Error, Result};
pub use federation::{
    run_search, Aggregation, FederationConfig, MetricsRow, PartyDataset, SearchResult,
};
pub use nas::{
    ArchitectureVariables, CandidateOpSet, CellGraph, DiscreteArchitecture, OpKind, SearchSpace,
    WeightParameters,
};
pub use privacy::{GdpLevel, PrivacyQuery, PrivacyReport, TradeoffFunction};
pub use tensor::{GradientVector, NamedTensors, Tensor};
pub use wire::{Broadcast, GradientMessage};
