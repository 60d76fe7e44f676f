//! Outfit recommendation engine: multimodal product catalog, triplet-trained
//! compatibility embeddings, exact nearest-neighbour retrieval and
//! appearance-aware re-ranking for diverse outfit assembly.

pub mod attribution;
pub mod catalog;
pub mod compat;
pub mod error;
pub mod evaluator;
pub mod nn;
pub mod outfit;
pub mod retrieval;
pub mod stylerank;

pub use error::{Error, Result};
