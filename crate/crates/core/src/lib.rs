//! Semantic jitter: densifying sparse supervision for relative attributes
//! with synthetic image pairs rendered from a procedural world.

pub mod attrworld;
pub mod cli;
pub mod error;
pub mod features;
pub mod harness;
pub mod modelfile;
pub mod pairgen;
pub mod prior;
pub mod rankers;
pub mod seed;

pub use error::{Error, Result};
