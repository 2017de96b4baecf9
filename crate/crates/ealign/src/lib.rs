//! Cross-graph entity alignment with a relation-aware reflection encoder,
//! attention-driven subgraph sampling and a negative-free symmetric loss.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod mem;
pub mod sampler;
pub mod semisup;
pub mod synth;
pub mod trainer;

pub use error::{EalignError, Result};
