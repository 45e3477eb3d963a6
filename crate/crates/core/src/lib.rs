//! Similarity-guided progressive decoder fusion for branched multi-task
//! networks.
//!
//! The crate measures how alike per-task decoder representations are
//! ([`similarity`]), picks task groupings by exhaustive partition search
//! ([`grouping`]), and drives the fuse-then-retrain loop over candidate
//! decoder stages ([`fusion`]), either against the built-in toy trainer
//! ([`toy`]) or an external one through session files.

pub mod activations;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod fusion;
pub mod grouping;
pub mod similarity;
pub mod toy;

#[cfg(test)]
mod testutil;

pub use activations::{ActivationBundle, ActivationMatrix, StageId, TaskId};
pub use error::{Error, ErrorClass, Result};
pub use grouping::{Group, Grouping, GroupingConfig, ValueMode};
pub use similarity::{SimilarityMatrix, SimilarityMethod};
