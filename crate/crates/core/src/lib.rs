//! Language-guided mixture-of-experts routing, semantic projection
//! distillation and query-language alignment, exercised end to end on a
//! synthetic long-tailed multi-camera benchmark.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod lmoe;
pub mod matching;
pub mod nn;
pub mod numkernel;
pub mod objectives;
pub mod registry;
pub mod scenegen;
pub mod semantics;

pub use error::{Error, Result};
