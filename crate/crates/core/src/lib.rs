//! Toolkit for instruction-following retrieval at desk scale: synthesizing
//! instruction/query/passage training corpora with judge-gated poisoned
//! negatives, training an instruction-aware fusion head over pluggable
//! embedding providers with marginal-sampling contrastive objectives, and
//! evaluating with MAP, nDCG@k, and p-MRR over paired instruction runs.

pub mod analytics;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
