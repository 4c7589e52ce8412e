//! Layer-redundancy toolkit for transformer encoders.
//!
//! The crate measures how similar the representations of consecutive
//! transformer blocks are, deletes blocks by similarity-derived heuristics
//! without retraining, and replaces the whole stack with small mimicking
//! networks trained by two-phase distillation.
//!
//! Everything runs on a built-in toy transformer classifier or on activation
//! dumps exported from external models in the `RSD1` binary format.

pub mod activation;
pub mod error;
pub mod mimic;
pub mod model;
pub mod numfmt;
pub mod parallel;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod similarity;

pub use activation::{center, read_dump, write_dump, ActivationDump, CenteredView};
pub use error::{Error, Result};
pub use mimic::{build_mimic, compare, ComparisonRow, MimicConfig, MimicLayerType, MimicNetwork, NetworkType};
pub use model::{ToyConfig, ToyTransformer};
pub use pruning::{BlockInfluence, Heuristic, PrunePlan, RetentionCurve};
pub use similarity::{Metric, SimilarityMatrix};
