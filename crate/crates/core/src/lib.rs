//! List-decodable linear regression from batches.
//!
//! Given `m` batches of `n` regression samples of which only an `α` fraction
//! come from a genuine model, [`algorithm::run`] returns a short list of
//! candidate regressors, at least one of which lies close to each genuine
//! parameter. The pipeline alternates Huber-clipped stationary solves with
//! a multifilter that downweights or splits soft clusters of batches.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithm;
pub mod clipping;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod multifilter;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    AlgoConfig, Batch, BatchCollection, FilterBranch, FilterOutcome, Sample, Triplet, WeightVector,
};
