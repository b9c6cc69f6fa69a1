//! Draft-and-refine agent for vision-language models.
//!
//! A model drafts an answer; the pipeline measures how much that answer
//! depends on question-relevant regions (the utilization score) by masking
//! sampled regions and comparing answers, then tries visual experts whose
//! renderings raise utilization and keeps the best one.
//!
//! The numeric core ([`relevance`], [`masking`], [`utilization`], the selector
//! network) is generic over [`Scalar`] (`f32` or `f64`); the pipeline runs
//! in `f64` and the aliases below name those instantiations.

// `!(x >= 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod digest;
pub mod error;
pub mod experts;
pub mod export;
pub mod fixtures;
pub mod harness;
pub mod masking;
pub mod pipeline;
pub mod relevance;
pub mod scalar;
pub mod selector;
pub mod utilization;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use backends::{BackendError, BackendSuite, Image};
pub use pipeline::{run_dnr, run_policy, select_expert, DnRConfig, DnRResult, Selection};

pub type RelevanceMap = relevance::RelevanceMap<f64>;
pub type RegionDistribution = relevance::RegionDistribution<f64>;
pub type RegionStats = relevance::RegionStats<f64>;
pub type Aggregate = utilization::Aggregate<f64>;
pub type Mlp = selector::Mlp<f64>;
