//! Learners on a target task that reuse upstream features.

pub mod offline;
pub mod online;
pub mod rfe;
pub mod shared;
