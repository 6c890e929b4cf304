//! Landmark imaginations for a toy vision-and-language navigation agent.
//!
//! The crate generates graph worlds and templated instructions, turns
//! landmark-bearing sub-instructions into imagination features, trains a
//! small cross-modal transformer with and without them, and evaluates the
//! resulting agents under the standard navigation metrics.

pub mod agent;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod imagination;
pub mod instructions;
pub mod numcore;
pub mod par;
pub mod rng;
pub mod sections;
pub mod training;
pub mod world;

pub use error::{Error, Result};
