//! Cross-modal image retrieval: text or sketch query features and images
//! represented as spatial feature grids are embedded into one space.
//!
//! Images are pooled with a sequence of LSTM-driven soft attention maps, one
//! per query object; queries and pooled image features pass through small
//! projection heads and are trained with a margin cosine-embedding loss.
//! Multi-object queries rank images by the sum of per-object distances.

pub mod attention;
pub mod datasetio;
pub mod embedheads;
pub mod experiment;
mod error;
pub mod numkernel;
pub mod pairgen;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result, Violation, ViolationKind};
