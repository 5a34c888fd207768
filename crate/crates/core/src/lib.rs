//! Multi-synonyms matching network for automatic ICD coding.

pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synonyms;
pub mod synthgen;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
