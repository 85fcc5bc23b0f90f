//! Auxiliary feature translation for few-shot, instance-level personalization of
//! object detectors.
//!
//! Frozen detector features are translated into an auxiliary space distilled
//! from a descriptive oracle, pooled per detected box, and relabeled with a
//! conditional coarse-to-fine prototypical classifier.

pub mod ddfp;
pub mod error;
pub mod eval;
pub mod fsl;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod tensor_store;
pub mod trainer;
pub mod translator;

pub use error::{Error, Result};
