//! Encoding-model toolkit: stimulus featurization, voxelwise linear encoders, alignment
//! statistics and perturbation contrasts.

pub mod container;
pub mod encoder;
pub mod error;
pub mod featurize;
pub mod lmtasks;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
