//! Toy multimodal (visible + thermal) pedestrian detector with a
//! functional-entropy / Fisher-information modality-balance regularizer,
//! synthetic data generation, and log-average miss-rate evaluation.

pub mod data;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod regularizer;
pub mod tensor;
