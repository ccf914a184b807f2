//! Offline multitask representation learning for finite low-rank MDPs.
//!
//! The upstream stage fits a shared feature map across tasks by exact
//! maximum likelihood over a finite model class and plans pessimistically
//! per task. Downstream consumers reuse the learned features for
//! reward-free exploration, pessimistic offline planning, and optimistic
//! online learning on a new task. Everything is tabular, so every value,
//! occupancy and bound is computed exactly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod downstream;
pub mod envgen;
pub mod io;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod model;
pub mod seed;
pub mod upstream;

pub use envgen::{ClassSpec, CoverageCertificate, TargetTaskSpec, TaskFamily};
pub use error::{Error, Result};
pub use mdp::{
    DeterministicPolicy, EmbeddingTable, FeatureTable, InitialDist, Kernel, Occupancy, Policy, RewardTable,
    StochasticPolicy, TabularLowRankMdp, Trajectory, ValueTable,
};
pub use model::{LearnedModel, ModelClass, OfflineDataset, Transition};
