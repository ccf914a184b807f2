//! Experiment plumbing: configs, seeded sweeps, statistics and the
//! invariant battery.

pub mod config;
pub mod stats;
pub mod sweep;
pub mod studies;
pub mod verify;
