//! Synthetic data, metrics, evaluation, ablation and gradient checks around
//! the animation pipeline.

pub mod ablate;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod scene;

pub use synwarp_core::data::SequenceRecord;
